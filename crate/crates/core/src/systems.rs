//! Concrete and abstract systems, the incrementally quadratic family, and
//! signal/trajectory machinery.
//!
//! The concrete system is `x' = f(t, x, u, w)`, `y = h(x)`. Its abstraction
//! integrates the nominal dynamics `f_d(t, x, v) = f(t, x, v, 0)` in a
//! continuous companion state and reports the quantized state at every
//! sample; quantization never feeds back into the companion dynamics.

use std::io::{self, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{Aabb, BoxError};
use crate::lattice::{LatticeError, LatticePoint, Quantizer};
use crate::numkernel::{self, Matrix, NumError, Vector};

/// Slack accepted when checking that a sampled signal lies in its set.
pub const MEMBERSHIP_TOL: f64 = 1e-9;
/// Default hold time of piecewise-constant disturbance realizations.
pub const DEFAULT_HOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error("input {u:?} at t = {t} leaves the input set")]
    InputViolation { t: f64, u: Vec<f64> },
    #[error("abstract input {v:?} at t = {t} leaves the input map")]
    InputMapViolation { t: f64, v: Vec<f64> },
    #[error("disturbance {w:?} at t = {t} leaves the disturbance set")]
    DisturbanceViolation { t: f64, w: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("implicit nonlinearities (nonzero D_q) cannot be simulated")]
    ImplicitNonlinearity,
    #[error("hold time must be positive, got {0}")]
    InvalidHold(f64),
}

/// `f(t, x, u, w)`.
pub type VectorField = Arc<dyn Fn(f64, &Vector, &Vector, &Vector) -> Vector + Send + Sync>;
/// `f_d(t, x, v)`.
pub type NominalField = Arc<dyn Fn(f64, &Vector, &Vector) -> Vector + Send + Sync>;
/// `p(t, q)`.
pub type Nonlinearity = Arc<dyn Fn(f64, &Vector) -> Vector + Send + Sync>;

/// Input constraint set: a box or all of `R^m`.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSet {
    Unbounded(usize),
    Box(Aabb),
}

impl InputSet {
    pub fn dim(&self) -> usize {
        match self {
            InputSet::Unbounded(m) => *m,
            InputSet::Box(b) => b.dim(),
        }
    }

    pub fn contains(&self, u: &Vector, tol: f64) -> bool {
        match self {
            InputSet::Unbounded(m) => u.len() == *m && u.iter().all(|v| v.is_finite()),
            InputSet::Box(b) => b.contains(u, tol),
        }
    }

    pub fn as_box(&self) -> Option<&Aabb> {
        match self {
            InputSet::Box(b) => Some(b),
            InputSet::Unbounded(_) => None,
        }
    }
}

/// Possibly time-varying input constraint `U'(t)` of the abstract system.
#[derive(Clone)]
pub enum InputMap {
    Constant(InputSet),
    TimeVarying(Arc<dyn Fn(f64) -> InputSet + Send + Sync>),
}

impl InputMap {
    pub fn at(&self, t: f64) -> InputSet {
        match self {
            InputMap::Constant(s) => s.clone(),
            InputMap::TimeVarying(f) => f(t),
        }
    }

    fn contains(&self, t: f64, v: &Vector) -> bool {
        match self {
            InputMap::Constant(s) => s.contains(v, MEMBERSHIP_TOL),
            InputMap::TimeVarying(f) => f(t).contains(v, MEMBERSHIP_TOL),
        }
    }
}

impl std::fmt::Debug for InputMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputMap::Constant(s) => f.debug_tuple("Constant").field(s).finish(),
            InputMap::TimeVarying(_) => f.write_str("TimeVarying(..)"),
        }
    }
}

/// Output map `h`.
#[derive(Clone)]
pub enum OutputMap {
    Linear(Matrix),
    Custom {
        map: Arc<dyn Fn(&Vector) -> Vector + Send + Sync>,
        dim: usize,
    },
}

impl OutputMap {
    pub fn identity(n: usize) -> Self {
        OutputMap::Linear(Matrix::identity(n, n))
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        match self {
            OutputMap::Linear(c) => c * x,
            OutputMap::Custom { map, .. } => map(x),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            OutputMap::Linear(c) => c.nrows(),
            OutputMap::Custom { dim, .. } => *dim,
        }
    }
}

impl std::fmt::Debug for OutputMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OutputMap::Linear(c) => f.debug_tuple("Linear").field(c).finish(),
            OutputMap::Custom { dim, .. } => write!(f, "Custom {{ dim: {dim} }}"),
        }
    }
}

/// The concrete system `x' = f(t, x, u, w)`, `y = h(x)`.
#[derive(Clone)]
pub struct ConcreteSystem {
    field: VectorField,
    output: OutputMap,
    n: usize,
    input_set: InputSet,
    disturbance_set: Aabb,
}

impl ConcreteSystem {
    pub fn new(
        field: VectorField,
        output: OutputMap,
        n: usize,
        input_set: InputSet,
        disturbance_set: Aabb,
    ) -> Self {
        Self {
            field,
            output,
            n,
            input_set,
            disturbance_set,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.input_set.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.dim()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.disturbance_set.dim()
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input_set
    }

    pub fn disturbance_set(&self) -> &Aabb {
        &self.disturbance_set
    }

    pub fn output(&self) -> &OutputMap {
        &self.output
    }

    pub fn eval(&self, t: f64, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        (self.field)(t, x, u, w)
    }

    /// Same plant with a different disturbance set.
    pub fn with_disturbance_set(&self, w: Aabb) -> Self {
        Self {
            disturbance_set: w,
            ..self.clone()
        }
    }

    /// Same plant with a different input set.
    pub fn with_input_set(&self, u: InputSet) -> Self {
        Self {
            input_set: u,
            ..self.clone()
        }
    }

    /// `f_d(t, x, v) = f(t, x, v, 0)`.
    pub fn nominal(&self) -> NominalField {
        let field = Arc::clone(&self.field);
        let zero = Vector::zeros(self.disturbance_dim());
        Arc::new(move |t, x, v| field(t, x, v, &zero))
    }
}

/// The abstraction: nominal dynamics over the lattice.
#[derive(Clone)]
pub struct AbstractSystem {
    nominal: NominalField,
    quantizer: Quantizer,
    output: OutputMap,
    input_map: InputMap,
}

impl AbstractSystem {
    pub fn new(
        nominal: NominalField,
        quantizer: Quantizer,
        output: OutputMap,
        input_map: InputMap,
    ) -> Self {
        Self {
            nominal,
            quantizer,
            output,
            input_map,
        }
    }

    /// Abstraction of `sys` on the lattice of `quantizer`.
    pub fn from_concrete(
        sys: &ConcreteSystem,
        quantizer: Quantizer,
        input_map: InputMap,
    ) -> Result<Self, SystemError> {
        if quantizer.dim() != sys.state_dim() {
            return Err(SystemError::DimensionMismatch(format!(
                "lattice dimension {} vs state dimension {}",
                quantizer.dim(),
                sys.state_dim()
            )));
        }
        Ok(Self::new(
            sys.nominal(),
            quantizer,
            sys.output.clone(),
            input_map,
        ))
    }

    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }

    pub fn output(&self) -> &OutputMap {
        &self.output
    }

    pub fn input_map(&self) -> &InputMap {
        &self.input_map
    }

    pub fn eval(&self, t: f64, x: &Vector, v: &Vector) -> Vector {
        (self.nominal)(t, x, v)
    }

    pub fn admits(&self, t: f64, v: &Vector) -> bool {
        self.input_map.contains(t, v)
    }

    pub fn with_input_map(&self, input_map: InputMap) -> Self {
        Self {
            input_map,
            ..self.clone()
        }
    }
}

/// `x' = A x + B u + E p(t, C_q x + D_q p) + w`, `y = C x`, with incremental
/// multiplier matrix `M` for `p`.
#[derive(Clone)]
pub struct IqcSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub e: Matrix,
    pub c_q: Matrix,
    pub d_q: Matrix,
    pub p: Nonlinearity,
    pub m: Matrix,
}

impl IqcSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Matrix,
        b: Matrix,
        c: Matrix,
        e: Matrix,
        c_q: Matrix,
        d_q: Matrix,
        p: Nonlinearity,
        m: Matrix,
    ) -> Result<Self, SystemError> {
        let sys = Self {
            a,
            b,
            c,
            e,
            c_q,
            d_q,
            p,
            m,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Linear system without nonlinearity (`l_p = l_e = 0`).
    pub fn linear(a: Matrix, b: Matrix, c: Matrix) -> Result<Self, SystemError> {
        let n = a.nrows();
        Self::new(
            a,
            b,
            c,
            Matrix::zeros(n, 0),
            Matrix::zeros(0, n),
            Matrix::zeros(0, 0),
            Arc::new(|_, _| Vector::zeros(0)),
            Matrix::zeros(0, 0),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Length of the nonlinearity argument `q`.
    pub fn lp(&self) -> usize {
        self.c_q.nrows()
    }

    /// Length of the nonlinearity value `p`.
    pub fn le(&self) -> usize {
        self.e.ncols()
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        let n = self.a.nrows();
        let mismatch = |what: &str| Err(SystemError::DimensionMismatch(what.to_string()));
        if self.a.ncols() != n {
            return mismatch("A must be square");
        }
        if self.b.nrows() != n {
            return mismatch("B row count must match A");
        }
        if self.c.ncols() != n {
            return mismatch("C column count must match A");
        }
        if self.e.nrows() != n {
            return mismatch("E row count must match A");
        }
        if self.c_q.ncols() != n {
            return mismatch("C_q column count must match A");
        }
        if self.d_q.shape() != (self.lp(), self.le()) {
            return mismatch("D_q must be l_p x l_e");
        }
        let k = self.lp() + self.le();
        if self.m.shape() != (k, k) {
            return mismatch("M must be (l_p + l_e) square");
        }
        if numkernel::relative_asymmetry(&self.m) > numkernel::SYMMETRY_TOL {
            return mismatch("M must be symmetric");
        }
        Ok(())
    }

    /// Concrete system with additive disturbance `w` of state dimension.
    pub fn concrete(
        &self,
        input_set: InputSet,
        disturbance_set: Aabb,
    ) -> Result<ConcreteSystem, SystemError> {
        let n = self.state_dim();
        if self.d_q.iter().any(|v| *v != 0.0) {
            return Err(SystemError::ImplicitNonlinearity);
        }
        if disturbance_set.dim() != n {
            return Err(SystemError::DimensionMismatch(format!(
                "disturbance set has dimension {}, state dimension is {n}",
                disturbance_set.dim()
            )));
        }
        if input_set.dim() != self.input_dim() {
            return Err(SystemError::DimensionMismatch(format!(
                "input set has dimension {}, B has {} columns",
                input_set.dim(),
                self.input_dim()
            )));
        }
        let (a, b, e, c_q, p) = (
            self.a.clone(),
            self.b.clone(),
            self.e.clone(),
            self.c_q.clone(),
            Arc::clone(&self.p),
        );
        let has_p = self.le() > 0;
        let field: VectorField = Arc::new(move |t, x, u, w| {
            let mut dx = &a * x + &b * u + w;
            if has_p {
                dx += &e * p(t, &(&c_q * x));
            }
            dx
        });
        Ok(ConcreteSystem::new(
            field,
            OutputMap::Linear(self.c.clone()),
            n,
            input_set,
            disturbance_set,
        ))
    }
}

type Feedback = Arc<dyn Fn(f64, &Vector) -> Vector + Send + Sync>;

/// Time signal. Feedback signals receive the state of the system they drive.
#[derive(Clone)]
pub enum Signal {
    Constant(Vector),
    /// `values[i]` holds on `[breakpoints[i], breakpoints[i + 1])`; the last
    /// value holds afterwards and the first before `breakpoints[0]`.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        values: Vec<Vector>,
    },
    Feedback(Feedback),
}

impl std::fmt::Debug for Signal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Signal::Constant(v) => f.debug_tuple("Constant").field(&v.as_slice()).finish(),
            Signal::PiecewiseConstant { breakpoints, .. } => {
                write!(f, "PiecewiseConstant({} segments)", breakpoints.len())
            }
            Signal::Feedback(_) => f.write_str("Feedback(..)"),
        }
    }
}

impl Signal {
    pub fn zero(dim: usize) -> Self {
        Signal::Constant(Vector::zeros(dim))
    }

    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(f64, &Vector) -> Vector + Send + Sync + 'static,
    {
        Signal::Feedback(Arc::new(f))
    }

    pub fn eval(&self, t: f64, state: &Vector) -> Vector {
        match self {
            Signal::Constant(v) => v.clone(),
            Signal::PiecewiseConstant {
                breakpoints,
                values,
            } => {
                let i = breakpoints.partition_point(|b| *b <= t);
                values[i.saturating_sub(1).min(values.len() - 1)].clone()
            }
            Signal::Feedback(f) => f(t, state),
        }
    }

    /// `sup ||s(t)||` over the span; `None` for feedback signals, whose values
    /// depend on a trajectory.
    pub fn sup_norm(&self, t_span: (f64, f64)) -> Option<f64> {
        match self {
            Signal::Constant(v) => Some(v.norm()),
            Signal::PiecewiseConstant {
                breakpoints,
                values,
            } => {
                let mut sup = 0.0_f64;
                for (i, v) in values.iter().enumerate() {
                    let start = if i == 0 {
                        f64::NEG_INFINITY
                    } else {
                        breakpoints[i]
                    };
                    let end = breakpoints.get(i + 1).copied().unwrap_or(f64::INFINITY);
                    if start <= t_span.1 && end > t_span.0 {
                        sup = sup.max(v.norm());
                    }
                }
                Some(sup)
            }
            Signal::Feedback(_) => None,
        }
    }
}

/// Piecewise-constant disturbance, each segment uniform over `w_set`,
/// reproducible from `seed`.
pub fn sample_disturbance(
    w_set: &Aabb,
    seed: u64,
    hold: f64,
    t_span: (f64, f64),
) -> Result<Signal, SystemError> {
    if !(hold > 0.0) || !hold.is_finite() {
        return Err(SystemError::InvalidHold(hold));
    }
    if w_set.is_degenerate_point() {
        return Ok(Signal::Constant(w_set.center()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut breakpoints = Vec::new();
    let mut values = Vec::new();
    let mut k: u64 = 0;
    loop {
        let t = t_span.0 + k as f64 * hold;
        if k > 0 && t >= t_span.1 {
            break;
        }
        breakpoints.push(t);
        values.push(w_set.sample(&mut rng));
        k += 1;
    }
    Ok(Signal::PiecewiseConstant {
        breakpoints,
        values,
    })
}

/// Sampled state and output path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub outputs: Vec<Vector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with header `t,x_1..x_n,y_1..y_l`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.states.first().map_or(0, |x| x.len());
        let l = self.outputs.first().map_or(0, |y| y.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=l).map(|i| format!("y_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for ((t, x), y) in self.times.iter().zip(&self.states).zip(&self.outputs) {
            write!(out, "{t}")?;
            for v in x.iter().chain(y.iter()) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// RK4 solution of the concrete system under input `u` and disturbance `w`.
/// Feedback signals receive the concrete state.
pub fn simulate_concrete(
    sys: &ConcreteSystem,
    x0: &Vector,
    u: &Signal,
    w: &Signal,
    t_span: (f64, f64),
    dt: f64,
) -> Result<Trajectory, SystemError> {
    if x0.len() != sys.state_dim() {
        return Err(SystemError::DimensionMismatch(format!(
            "initial state has length {}, system dimension is {}",
            x0.len(),
            sys.state_dim()
        )));
    }
    let field = |t: f64, x: &Vector| -> Result<Vector, SystemError> {
        let uu = u.eval(t, x);
        if !sys.input_set.contains(&uu, MEMBERSHIP_TOL) {
            return Err(SystemError::InputViolation {
                t,
                u: uu.as_slice().to_vec(),
            });
        }
        let ww = w.eval(t, x);
        if !sys.disturbance_set.contains(&ww, MEMBERSHIP_TOL) {
            return Err(SystemError::DisturbanceViolation {
                t,
                w: ww.as_slice().to_vec(),
            });
        }
        Ok(sys.eval(t, x, &uu, &ww))
    };
    let sol = numkernel::integrate_rk4(field, x0, t_span, dt)?;
    let outputs = sol.states.iter().map(|x| sys.output.apply(x)).collect();
    Ok(Trajectory {
        times: sol.times,
        states: sol.states,
        outputs,
    })
}

/// Continuous companion `x_hat` and quantized state `x_2 = Q(x_hat)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractRun {
    pub continuous: Trajectory,
    pub lattice: Trajectory,
    pub points: Vec<LatticePoint>,
}

impl AbstractRun {
    /// `max_t ||x_2(t) - x_hat(t)||`.
    pub fn max_quantization_error(&self) -> f64 {
        self.continuous
            .states
            .iter()
            .zip(&self.lattice.states)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Simulates the abstract system from a lattice point. Feedback signals
/// receive the continuous companion state.
pub fn simulate_abstract(
    abs: &AbstractSystem,
    x0: &LatticePoint,
    v: &Signal,
    t_span: (f64, f64),
    dt: f64,
) -> Result<AbstractRun, SystemError> {
    let q = abs.quantizer();
    if x0.dim() != q.dim() {
        return Err(SystemError::DimensionMismatch(format!(
            "lattice point has dimension {}, lattice is {}",
            x0.dim(),
            q.dim()
        )));
    }
    let start = q.coordinates(x0);
    let field = |t: f64, x: &Vector| -> Result<Vector, SystemError> {
        let vv = v.eval(t, x);
        if !abs.admits(t, &vv) {
            return Err(SystemError::InputMapViolation {
                t,
                v: vv.as_slice().to_vec(),
            });
        }
        Ok(abs.eval(t, x, &vv))
    };
    let sol = numkernel::integrate_rk4(field, &start, t_span, dt)?;
    let points = sol
        .states
        .iter()
        .map(|x| q.quantize(x))
        .collect::<Result<Vec<_>, _>>()?;
    let lattice_states: Vec<Vector> = points.iter().map(|p| q.coordinates(p)).collect();
    let continuous = Trajectory {
        outputs: sol.states.iter().map(|x| abs.output.apply(x)).collect(),
        times: sol.times.clone(),
        states: sol.states,
    };
    let lattice = Trajectory {
        outputs: lattice_states.iter().map(|x| abs.output.apply(x)).collect(),
        times: sol.times,
        states: lattice_states,
    };
    Ok(AbstractRun {
        continuous,
        lattice,
        points,
    })
}
