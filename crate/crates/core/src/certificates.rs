//! Certificate mathematics for incrementally quadratic systems.
//!
//! A certificate `(P, L, alpha, M)` is verified, never synthesized: the
//! composite matrix inequality is checked for negative semidefiniteness, the
//! multiplier constraint and the Lyapunov decrease condition are falsified by
//! sampling, and the closed-form bounds (admissible `eta`, disturbance radius,
//! comparison envelopes, interface error margin) are evaluated from the
//! certificate's spectral data.
//!
//! With the quadratic Lyapunov function `V = (x - x')^T P (x - x')` the
//! comparison functions are `lower(r) = lambda_min r^2`,
//! `upper(r) = lambda_max r^2`, `sigma1(eta) = 2 ||L_hat|| eta^2 / alpha` and
//! `sigma2(w) = 2 ||P|| w^2 / alpha`, where `L_hat = L^T B^T P B L`. The decay
//! rate `mu` of the decrease condition is `alpha`.
//!
//! Falsifier verdicts are evidence, not proofs: `Pass` means no violation was
//! found among the samples drawn.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Aabb;
use crate::hierarchy::ControlInterface;
use crate::numkernel::{self, Matrix, NumError, Vector};
use crate::systems::{AbstractSystem, ConcreteSystem, InputSet, IqcSystem, Nonlinearity, SystemError};

/// Negative semidefiniteness tolerance on the largest eigenvalue.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Slack on falsifier inequalities.
pub const FALSIFIER_TOL: f64 = 1e-7;
/// Default falsifier sample count.
pub const DEFAULT_SAMPLES: usize = 10_000;

const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("P is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("decay rate alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("precision must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("output matrix has zero norm")]
    ZeroOutputMatrix,
    #[error("disturbance too large: eta bound prefactor is {0:e} <= 0")]
    DisturbanceTooLarge(f64),
    #[error("input map is empty: margin {margin} exceeds half the width of the input box")]
    EmptyInputMap { margin: f64 },
    #[error("malformed matrix: {0}")]
    MalformedMatrix(String),
    #[error("certificate file: {0}")]
    File(String),
}

/// Constants derived from a certificate and the input matrix `B`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedConstants {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Spectral norm of `P` (equal to `lambda_max` for `P > 0`).
    pub p_norm: f64,
    pub l_norm: f64,
    pub l_hat_norm: f64,
    /// Coefficient of `eta^2` in `sigma1`.
    pub sigma1_gain: f64,
    /// Coefficient of `||w||^2` in `sigma2`.
    pub sigma2_gain: f64,
    pub k1: f64,
    pub k2: f64,
}

/// Certificate `(P, L, alpha, M)` with derived constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub p: Matrix,
    pub l: Matrix,
    pub alpha: f64,
    pub m: Matrix,
    derived: DerivedConstants,
}

impl Certificate {
    pub fn new(p: Matrix, l: Matrix, alpha: f64, m: Matrix, b: &Matrix) -> Result<Self, CertError> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(CertError::DimensionMismatch("P must be square".into()));
        }
        if b.nrows() != n || l.nrows() != b.ncols() || l.ncols() != n {
            return Err(CertError::DimensionMismatch(format!(
                "P is {n}x{n}, B is {}x{}, L is {}x{}",
                b.nrows(),
                b.ncols(),
                l.nrows(),
                l.ncols()
            )));
        }
        if m.nrows() != m.ncols() {
            return Err(CertError::DimensionMismatch("M must be square".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CertError::InvalidAlpha(alpha));
        }
        let spec = numkernel::sym_eigen(&p)?;
        let (lambda_min, lambda_max) = (spec.min(), spec.max());
        if !(lambda_min > 0.0) {
            return Err(CertError::NotPositiveDefinite(lambda_min));
        }
        let bl = b * &l;
        let l_hat = bl.transpose() * &p * &bl;
        let l_hat = (&l_hat + l_hat.transpose()) * 0.5;
        let l_hat_norm = numkernel::sym_spectral_norm(&l_hat)?;
        let p_norm = spec.max_abs();
        let l_norm = numkernel::spectral_norm(&l)?;
        let a2 = alpha * alpha;
        let derived = DerivedConstants {
            lambda_min,
            lambda_max,
            p_norm,
            l_norm,
            l_hat_norm,
            sigma1_gain: 2.0 * l_hat_norm / alpha,
            sigma2_gain: 2.0 * p_norm / alpha,
            k1: (lambda_max / lambda_min + 2.0 * l_hat_norm / (a2 * lambda_min)).sqrt(),
            k2: (2.0 * lambda_max / (a2 * lambda_min)).sqrt(),
        };
        Ok(Self {
            p,
            l,
            alpha,
            m,
            derived,
        })
    }

    pub fn derived(&self) -> &DerivedConstants {
        &self.derived
    }

    /// Decay rate of the Lyapunov decrease condition.
    pub fn mu(&self) -> f64 {
        self.alpha
    }

    pub fn sigma1(&self, eta: f64) -> f64 {
        self.derived.sigma1_gain * eta * eta
    }

    pub fn sigma2(&self, w_sup: f64) -> f64 {
        self.derived.sigma2_gain * w_sup * w_sup
    }

    pub fn gains(&self) -> QuadraticGains {
        QuadraticGains {
            lambda_min: self.derived.lambda_min,
            lambda_max: self.derived.lambda_max,
            sigma1_gain: self.derived.sigma1_gain,
            sigma2_gain: self.derived.sigma2_gain,
            mu: self.mu(),
        }
    }

    /// Same `P`, `L`, `M` with a different decay rate.
    pub fn with_alpha(&self, alpha: f64, b: &Matrix) -> Result<Self, CertError> {
        Self::new(self.p.clone(), self.l.clone(), alpha, self.m.clone(), b)
    }

    pub fn to_file(&self) -> CertificateFile {
        CertificateFile {
            p: matrix_to_rows(&self.p),
            l: matrix_to_rows(&self.l),
            alpha: self.alpha,
            m: matrix_to_rows(&self.m),
        }
    }
}

/// Certificate of a linear system from the Riccati equation
/// `A^T P + P A - P B B^T P + I = 0`: `L = -B^T P / 2` and
/// `alpha = 1 / (2 lambda_max(P))`. With this gain the closed-loop Lyapunov
/// block equals `-I + 2 alpha P`, so `alpha` is the largest feasible decay rate.
pub fn riccati_certificate(sys: &IqcSystem) -> Result<Certificate, CertError> {
    if sys.le() > 0 {
        return Err(CertError::DimensionMismatch(
            "Riccati certificates require a system without nonlinearity".into(),
        ));
    }
    let n = sys.state_dim();
    let p = numkernel::solve_riccati(&sys.a, &sys.b, &Matrix::identity(n, n))?;
    let l = sys.b.transpose() * &p * -0.5;
    let alpha = 0.5 / numkernel::sym_eigen(&p)?.max();
    Certificate::new(p, l, alpha, Matrix::zeros(0, 0), &sys.b)
}

/// On-disk certificate: matrices as row-major nested arrays.
///
/// ```toml
/// alpha = 3.7
/// p = [[1.0, 0.0], [0.0, 1.0]]
/// l = [[-5.4, 0.0], [0.0, -5.4]]
/// m = [[2.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0],
///      [0.0, 0.0, -1.0, 0.0], [0.0, 0.0, 0.0, -1.0]]
/// ```
///
/// `m = []` denotes a system without nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub alpha: f64,
    pub p: Vec<Vec<f64>>,
    pub l: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
}

impl CertificateFile {
    pub fn from_toml_str(s: &str) -> Result<Self, CertError> {
        toml::from_str(s).map_err(|e| CertError::File(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String, CertError> {
        toml::to_string(self).map_err(|e| CertError::File(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CertError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CertError::File(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn store(&self, path: &Path) -> Result<(), CertError> {
        fs::write(path, self.to_toml_string()?)
            .map_err(|e| CertError::File(format!("{}: {e}", path.display())))
    }

    pub fn into_certificate(self, b: &Matrix) -> Result<Certificate, CertError> {
        let n = b.nrows();
        let p = matrix_from_rows(&self.p, n)?;
        let l = matrix_from_rows(&self.l, n)?;
        let m = matrix_from_rows(&self.m, self.m.len())?;
        Certificate::new(p, l, self.alpha, m, b)
    }
}

/// Row-major nested vectors to a matrix; `cols` is used when there are no rows.
pub fn matrix_from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Matrix, CertError> {
    let ncols = rows.first().map_or(cols, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CertError::MalformedMatrix("ragged rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CertError::MalformedMatrix("non-finite entry".into()));
    }
    Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Outcome of the composite matrix inequality test.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixInequalityReport {
    pub feasible: bool,
    /// Largest eigenvalue of the full composite matrix.
    pub max_eigenvalue: f64,
    /// Largest eigenvalue of the Schur complement with respect to the
    /// nonlinearity block, when that block is negative definite.
    pub schur_max_eigenvalue: Option<f64>,
    pub composite: Matrix,
}

/// Assembles
/// `[[P(A+BL) + (A+BL)^T P + 2 alpha P, P E], [E^T P, 0]] + T^T M T`
/// with `T = [[C_q, D_q], [0, I]]`, and tests it for negative
/// semidefiniteness.
pub fn check_matrix_inequality(
    sys: &IqcSystem,
    cert: &Certificate,
    tol: f64,
) -> Result<MatrixInequalityReport, CertError> {
    sys.validate()?;
    let n = sys.state_dim();
    let (lp, le) = (sys.lp(), sys.le());
    if cert.p.nrows() != n || cert.l.shape() != (sys.input_dim(), n) {
        return Err(CertError::DimensionMismatch(format!(
            "certificate P is {}x{}, L is {}x{}; system has n = {n}, m = {}",
            cert.p.nrows(),
            cert.p.ncols(),
            cert.l.nrows(),
            cert.l.ncols(),
            sys.input_dim()
        )));
    }
    if cert.m.nrows() != lp + le {
        return Err(CertError::DimensionMismatch(format!(
            "M is {}x{}, expected {}",
            cert.m.nrows(),
            cert.m.ncols(),
            lp + le
        )));
    }

    let p = &cert.p;
    let closed = &sys.a + &sys.b * &cert.l;
    let top_left = p * &closed + closed.transpose() * p + p * (2.0 * cert.alpha);
    let pe = p * &sys.e;

    let k = n + le;
    let mut composite = Matrix::zeros(k, k);
    composite.view_mut((0, 0), (n, n)).copy_from(&top_left);
    composite.view_mut((0, n), (n, le)).copy_from(&pe);
    composite.view_mut((n, 0), (le, n)).copy_from(&pe.transpose());

    let mut t = Matrix::zeros(lp + le, k);
    t.view_mut((0, 0), (lp, n)).copy_from(&sys.c_q);
    t.view_mut((0, n), (lp, le)).copy_from(&sys.d_q);
    t.view_mut((lp, n), (le, le)).fill_with_identity();
    composite += t.transpose() * &cert.m * &t;
    let composite = (&composite + composite.transpose()) * 0.5;

    let max_eigenvalue = numkernel::sym_eigen(&composite)?.max();

    let schur_max_eigenvalue = if le == 0 {
        Some(max_eigenvalue)
    } else {
        let lower = composite.view((n, n), (le, le)).into_owned();
        if numkernel::sym_eigen(&lower)?.max() < -tol {
            let upper = composite.view((0, 0), (n, n)).into_owned();
            let off = composite.view((0, n), (n, le)).into_owned();
            let inv = lower
                .clone()
                .try_inverse()
                .ok_or(NumError::Singular)?;
            let schur = &upper - &off * inv * off.transpose();
            let schur = (&schur + schur.transpose()) * 0.5;
            Some(numkernel::sym_eigen(&schur)?.max())
        } else {
            None
        }
    };

    Ok(MatrixInequalityReport {
        feasible: max_eigenvalue <= tol,
        max_eigenvalue,
        schur_max_eigenvalue,
        composite,
    })
}

/// Violation of the incremental quadratic constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierCounterexample {
    pub q1: Vector,
    pub q2: Vector,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MultiplierVerdict {
    Pass { samples: usize },
    Counterexample(MultiplierCounterexample),
}

impl MultiplierVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, MultiplierVerdict::Pass { .. })
    }
}

/// Sampling budget shared by the falsifiers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            tol: FALSIFIER_TOL,
        }
    }
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

// Half the pairs are independent uniform draws, the other half are close
// pairs with log-uniform separation, which probe small increments.
fn sample_pair<R: Rng>(rng: &mut R, domain: &Aabb, index: usize) -> (Vector, Vector) {
    let a = domain.sample(rng);
    if index.is_multiple_of(2) {
        return (a, domain.sample(rng));
    }
    let diam = domain
        .lo()
        .iter()
        .zip(domain.hi())
        .map(|(l, h)| (h - l).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(1e-12);
    let radius = diam * 10f64.powf(-4.0 * rng.random::<f64>());
    let mut dir = Vector::from_fn(a.len(), |_, _| rng.random_range(-1.0..1.0));
    let norm = dir.norm();
    if norm > 0.0 {
        dir /= norm;
    }
    let b = &a + dir * radius;
    (a, b)
}

fn sample_time<R: Rng>(rng: &mut R, span: (f64, f64)) -> f64 {
    if span.1 > span.0 {
        rng.random_range(span.0..=span.1)
    } else {
        span.0
    }
}

/// Falsifies `[dq; dp]^T M [dq; dp] >= 0` on sampled pairs `q1, q2` from
/// `domain` and times from `time_span`.
pub fn check_multiplier(
    p: &Nonlinearity,
    m: &Matrix,
    domain: &Aabb,
    time_span: (f64, f64),
    sampling: Sampling,
) -> Result<MultiplierVerdict, CertError> {
    let lp = domain.dim();
    let le = p(time_span.0, &domain.center()).len();
    if m.shape() != (lp + le, lp + le) {
        return Err(CertError::DimensionMismatch(format!(
            "M is {}x{}, expected {}",
            m.nrows(),
            m.ncols(),
            lp + le
        )));
    }
    let chunks = sampling.samples.div_ceil(CHUNK);
    let found: Vec<Option<MultiplierCounterexample>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(sampling.seed, c);
            let count = CHUNK.min(sampling.samples - c * CHUNK);
            for i in 0..count {
                let (q1, q2) = sample_pair(&mut rng, domain, i);
                let t = sample_time(&mut rng, time_span);
                let dp = p(t, &q2) - p(t, &q1);
                let dq = &q2 - &q1;
                let z = Vector::from_iterator(lp + le, dq.iter().chain(dp.iter()).copied());
                let value = z.dot(&(m * &z));
                if value < -sampling.tol {
                    return Some(MultiplierCounterexample { q1, q2, t, value });
                }
            }
            None
        })
        .collect();
    Ok(match found.into_iter().flatten().next() {
        Some(cex) => MultiplierVerdict::Counterexample(cex),
        None => MultiplierVerdict::Pass {
            samples: sampling.samples,
        },
    })
}

/// Region over which the Lyapunov decrease condition is sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct FalsifierDomain {
    /// Box for both `x` and `x'`.
    pub states: Aabb,
    pub time: (f64, f64),
    /// Used for `v` whenever `U'(t)` is unbounded.
    pub inputs: Aabb,
}

/// Sample at which the decrease condition fails.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCounterexample {
    pub t: f64,
    pub x: Vector,
    pub x_prime: Vector,
    pub v: Vector,
    pub w: Vector,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LyapunovVerdict {
    Pass { samples: usize },
    Counterexample(Box<LyapunovCounterexample>),
}

impl LyapunovVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, LyapunovVerdict::Pass { .. })
    }
}

/// Samples `(t, x, x', v, w)` and checks
/// `dV/dx f(t, x, u, w) + dV/dx' f_d(t, x', v) <= -mu V + sigma1(eta) + sigma2(w_bar) + tol`
/// with `u = u_v(t, v, x, Q(x'))`, `V = (x - x')^T P (x - x')`, `mu = alpha`,
/// `eta` from the abstraction's lattice and `w_bar` the largest disturbance norm.
pub fn falsify_cgps_lyapunov(
    sys: &ConcreteSystem,
    abs: &AbstractSystem,
    interface: &ControlInterface,
    cert: &Certificate,
    domain: &FalsifierDomain,
    sampling: Sampling,
) -> Result<LyapunovVerdict, CertError> {
    let n = sys.state_dim();
    if cert.p.nrows() != n || domain.states.dim() != n {
        return Err(CertError::DimensionMismatch(format!(
            "state dimension {n}, P is {}x{}, domain has dimension {}",
            cert.p.nrows(),
            cert.p.ncols(),
            domain.states.dim()
        )));
    }
    let q = abs.quantizer();
    let eta = q.eta();
    let w_set = sys.disturbance_set();
    let offset = cert.sigma1(eta) + cert.sigma2(w_set.max_norm());
    let mu = cert.mu();

    let chunks = sampling.samples.div_ceil(CHUNK);
    let found: Vec<Result<Option<LyapunovCounterexample>, CertError>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(sampling.seed, c);
            let count = CHUNK.min(sampling.samples - c * CHUNK);
            for i in 0..count {
                let (x, x_prime) = sample_pair(&mut rng, &domain.states, i);
                let t = sample_time(&mut rng, domain.time);
                let v = match abs.input_map().at(t) {
                    InputSet::Box(b) => b.sample(&mut rng),
                    InputSet::Unbounded(_) => domain.inputs.sample(&mut rng),
                };
                let w = w_set.sample(&mut rng);
                let x2 = q.quantize_coords(&x_prime).map_err(SystemError::from)?;
                let u = interface.apply(t, &v, &x, &x2);
                let delta = &x - &x_prime;
                let drift = sys.eval(t, &x, &u, &w) - abs.eval(t, &x_prime, &v);
                let lhs = 2.0 * delta.dot(&(&cert.p * drift));
                let rhs = -mu * delta.dot(&(&cert.p * &delta)) + offset;
                if lhs > rhs + sampling.tol * (1.0 + rhs.abs()) {
                    return Ok(Some(LyapunovCounterexample {
                        t,
                        x,
                        x_prime,
                        v,
                        w,
                        lhs,
                        rhs,
                    }));
                }
            }
            Ok(None)
        })
        .collect();
    for r in found {
        if let Some(cex) = r? {
            return Ok(LyapunovVerdict::Counterexample(Box::new(cex)));
        }
    }
    Ok(LyapunovVerdict::Pass {
        samples: sampling.samples,
    })
}

/// Spectral and gain data of the quadratic instantiation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticGains {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub sigma1_gain: f64,
    pub sigma2_gain: f64,
    pub mu: f64,
}

impl QuadraticGains {
    /// `lower^-1(upper(r)) = sqrt(lambda_max / lambda_min) r`.
    fn comparison_ratio(&self) -> f64 {
        (self.lambda_max / self.lambda_min).sqrt()
    }

    /// `lower^-1(s) = sqrt(s / lambda_min)`.
    fn lower_inv(&self, s: f64) -> f64 {
        (s / self.lambda_min).sqrt()
    }
}

/// Comparison envelope `beta(r, t) + offset` on `||x_1(t) - x_hat_2(t)||`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KLBound {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Decay rate of `V` outside the offset ball, `mu / 2`.
    pub decay: f64,
    /// `lower^-1(upper(lower^-1((2 sigma1(eta) + 2 sigma2(w)) / mu)))`.
    pub offset: f64,
}

impl KLBound {
    pub fn new(cert: &Certificate, eta: f64, w_sup: f64) -> Self {
        let g = cert.gains();
        let inner = g.lower_inv((2.0 * cert.sigma1(eta) + 2.0 * cert.sigma2(w_sup)) / g.mu);
        Self {
            lambda_min: g.lambda_min,
            lambda_max: g.lambda_max,
            decay: g.mu / 2.0,
            offset: g.comparison_ratio() * inner,
        }
    }

    /// `beta(r, t) = lower^-1(exp(-decay t) upper(r))`.
    pub fn beta(&self, r: f64, t: f64) -> f64 {
        ((-self.decay * t).exp() * self.lambda_max * r * r / self.lambda_min).sqrt()
    }

    /// Envelope on the distance between the concrete state and the
    /// continuous abstract companion.
    pub fn envelope(&self, delta0: f64, t: f64) -> f64 {
        self.beta(delta0, t) + self.offset
    }

    /// Envelope on the distance to the quantized abstract state.
    pub fn lattice_envelope(&self, delta0: f64, t: f64, eta: f64) -> f64 {
        self.envelope(delta0, t) + eta
    }
}

/// `beta(delta0, t) + offset(eta, w_sup)`.
pub fn kl_envelope(cert: &Certificate, delta0: f64, eta: f64, w_sup: f64, t: f64) -> f64 {
    KLBound::new(cert, eta, w_sup).envelope(delta0, t)
}

fn output_norm(c: &Matrix) -> Result<f64, CertError> {
    let norm = numkernel::spectral_norm(c)?;
    if norm > 0.0 {
        Ok(norm)
    } else {
        Err(CertError::ZeroOutputMatrix)
    }
}

/// Largest discretization parameter for which precision `epsilon` is
/// guaranteed under disturbances of sup-norm `w_sup`.
pub fn eta_bound(cert: &Certificate, c: &Matrix, epsilon: f64, w_sup: f64) -> Result<f64, CertError> {
    if !(epsilon > 0.0) {
        return Err(CertError::InvalidEpsilon(epsilon));
    }
    let d = cert.derived();
    let c_norm = output_norm(c)?;
    let a = cert.alpha * d.lambda_min.sqrt();
    let prefactor = epsilon / c_norm - 2.0 * d.lambda_max.sqrt() * w_sup / a;
    if !(prefactor > 0.0) {
        return Err(CertError::DisturbanceTooLarge(prefactor));
    }
    let root = (cert.alpha * cert.alpha * d.lambda_max + 2.0 * d.l_hat_norm).sqrt();
    Ok(prefactor * (a / (a + root)))
}

/// Disturbance radius `alpha eps sqrt(lambda_min) / (2 ||C|| sqrt(lambda_max))`;
/// disturbances must stay strictly below it.
pub fn disturbance_bound(cert: &Certificate, c: &Matrix, epsilon: f64) -> Result<f64, CertError> {
    if !(epsilon > 0.0) {
        return Err(CertError::InvalidEpsilon(epsilon));
    }
    let d = cert.derived();
    let c_norm = output_norm(c)?;
    Ok(cert.alpha * epsilon * d.lambda_min.sqrt() / (2.0 * c_norm * d.lambda_max.sqrt()))
}

/// Both sides of the composed comparison-function condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaConditionSides {
    pub lhs: f64,
    pub rhs: f64,
}

impl EtaConditionSides {
    pub fn holds(&self) -> bool {
        self.lhs < self.rhs
    }
}

/// `lower^-1(upper(eta)) + eta + lower^-1(upper(lower^-1(4 sigma1(eta) / mu)))`
/// versus `epsilon / rho - lower^-1(upper(lower^-1(4 sigma2(w) / mu)))`.
pub fn theorem2_eta_sides(
    gains: &QuadraticGains,
    rho: f64,
    epsilon: f64,
    eta: f64,
    w_sup: f64,
) -> EtaConditionSides {
    let k = gains.comparison_ratio();
    let s1 = gains.sigma1_gain * eta * eta;
    let s2 = gains.sigma2_gain * w_sup * w_sup;
    let lhs = k * eta + eta + k * gains.lower_inv(4.0 * s1 / gains.mu);
    let rhs = epsilon / rho - k * gains.lower_inv(4.0 * s2 / gains.mu);
    EtaConditionSides { lhs, rhs }
}

pub fn theorem2_eta_condition(
    gains: &QuadraticGains,
    rho: f64,
    epsilon: f64,
    eta: f64,
    w_sup: f64,
) -> bool {
    theorem2_eta_sides(gains, rho, epsilon, eta, w_sup).holds()
}

/// `U' = U \ U~`, where `U~` holds the points of `U` closer than `margin` to
/// its boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMapSpec {
    pub base: InputSet,
    pub margin: f64,
    pub shrunk: InputSet,
}

/// Interface error margin `||L|| ((K1 + 1) eta + K2 w_bar)`.
pub fn interface_margin(cert: &Certificate, eta: f64, w_bar: f64) -> f64 {
    let d = cert.derived();
    d.l_norm * ((d.k1 + 1.0) * eta + d.k2 * w_bar)
}

pub fn admissible_input_map(
    u: &InputSet,
    cert: &Certificate,
    eta: f64,
    w_bar: f64,
) -> Result<InputMapSpec, CertError> {
    let margin = interface_margin(cert, eta, w_bar);
    let shrunk = match u {
        InputSet::Unbounded(m) => InputSet::Unbounded(*m),
        InputSet::Box(b) => InputSet::Box(b.shrink(margin).ok_or(CertError::EmptyInputMap { margin })?),
    };
    Ok(InputMapSpec {
        base: u.clone(),
        margin,
        shrunk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples;
    use std::sync::Arc;

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&Vector::from_vec(v.to_vec()))
    }

    #[test]
    fn first_example_inequality_is_feasible() {
        let sys = examples::example1_system();
        let cert = examples::example1_certificate().unwrap();
        let r = check_matrix_inequality(&sys, &cert, FEASIBILITY_TOL).unwrap();
        assert!(r.feasible);
        let expected = Matrix::from_row_slice(
            4,
            4,
            &[
                -1.1, 0.0, 1.0, 0.0, //
                0.0, -1.3, 0.0, 1.0, //
                1.0, 0.0, -1.0, 0.0, //
                0.0, 1.0, 0.0, -1.0,
            ],
        );
        assert!((&r.composite - expected).amax() < 1e-12);
        assert!((r.schur_max_eigenvalue.unwrap() + 0.1).abs() < 1e-12);
    }

    #[test]
    fn inflated_alpha_is_infeasible() {
        let sys = examples::example1_system();
        let cert = examples::example1_certificate()
            .unwrap()
            .with_alpha(10.0, &sys.b)
            .unwrap();
        let r = check_matrix_inequality(&sys, &cert, FEASIBILITY_TOL).unwrap();
        assert!(!r.feasible);
        // 2 (0.15 - 5.4) + 20 from the Lyapunov block, +2 from M.
        assert!((r.composite[(0, 0)] - 11.5).abs() < 1e-12);
    }

    #[test]
    fn stable_diagonal_without_nonlinearity() {
        let n = 2;
        let sys = IqcSystem::new(
            -Matrix::identity(n, n),
            Matrix::identity(n, n),
            Matrix::identity(n, n),
            Matrix::zeros(n, n),
            Matrix::identity(n, n),
            Matrix::zeros(n, n),
            Arc::new(|_, q: &Vector| q * 0.0),
            Matrix::zeros(2 * n, 2 * n),
        )
        .unwrap();
        let cert = Certificate::new(
            Matrix::identity(n, n),
            Matrix::zeros(n, n),
            0.5,
            Matrix::zeros(2 * n, 2 * n),
            &sys.b,
        )
        .unwrap();
        let r = check_matrix_inequality(&sys, &cert, FEASIBILITY_TOL).unwrap();
        assert!(r.feasible);
        assert!((r.composite[(0, 0)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn inequality_dimension_mismatch() {
        let sys = examples::example1_system();
        let cert = Certificate::new(
            Matrix::identity(2, 2),
            Matrix::zeros(2, 2),
            1.0,
            Matrix::zeros(2, 2),
            &sys.b,
        )
        .unwrap();
        assert!(matches!(
            check_matrix_inequality(&sys, &cert, FEASIBILITY_TOL),
            Err(CertError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn certificate_validation() {
        let b = Matrix::identity(2, 2);
        assert!(matches!(
            Certificate::new(diag(&[1.0, -1.0]), Matrix::zeros(2, 2), 1.0, Matrix::zeros(0, 0), &b),
            Err(CertError::NotPositiveDefinite(_))
        ));
        assert!(matches!(
            Certificate::new(Matrix::identity(2, 2), Matrix::zeros(2, 2), 0.0, Matrix::zeros(0, 0), &b),
            Err(CertError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn derived_constants_first_example() {
        let cert = examples::example1_certificate().unwrap();
        let d = cert.derived();
        assert_eq!(d.lambda_min, 1.0);
        assert_eq!(d.lambda_max, 1.0);
        assert!((d.l_hat_norm - 29.16).abs() < 1e-12);
        assert!((d.l_norm - 5.4).abs() < 1e-12);
        let k1 = (1.0 + 2.0 * 29.16 / (3.7f64 * 3.7)).sqrt();
        assert!((d.k1 - k1).abs() < 1e-12);
        assert!((d.k2 - (2.0 / (3.7f64 * 3.7)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn multiplier_cases() {
        let dom = Aabb::symmetric(2, 5.0).unwrap();
        let zero: Nonlinearity = Arc::new(|_, q: &Vector| q * 0.0);
        let m = diag(&[1.0, 1.0, -1.0, -1.0]);
        let s = Sampling {
            samples: 2000,
            ..Sampling::default()
        };
        assert!(check_multiplier(&zero, &m, &dom, (0.0, 10.0), s).unwrap().passed());

        let sine = examples::example1_nonlinearity();
        let m2 = diag(&[2.0, 2.0, -1.0, -1.0]);
        assert!(check_multiplier(&sine, &m2, &dom, (0.0, 10.0), s).unwrap().passed());

        let double: Nonlinearity = Arc::new(|_, q: &Vector| q * 2.0);
        match check_multiplier(&double, &m, &dom, (0.0, 10.0), s).unwrap() {
            MultiplierVerdict::Counterexample(c) => {
                let dq = (&c.q2 - &c.q1).norm_squared();
                assert!((c.value + 3.0 * dq).abs() < 1e-9 * (1.0 + dq));
            }
            other => panic!("expected counterexample, got {other:?}"),
        }
        assert!(check_multiplier(&zero, &diag(&[1.0, 1.0]), &dom, (0.0, 1.0), s).is_err());
    }

    #[test]
    fn falsifier_diagonal_pair_reduces_to_offset() {
        // With x = x' and w = 0 the left side vanishes.
        let (sys, abs, iface, cert) = examples::example1_setup(examples::EX1_ETA).unwrap();
        let x = Vector::from_vec(vec![0.7, -1.3]);
        let v = Vector::from_vec(vec![0.2, 0.1]);
        let x2 = abs.quantizer().quantize_coords(&x).unwrap();
        let u = iface.apply(0.5, &v, &x, &x2);
        let drift = sys.eval(0.5, &x, &u, &Vector::zeros(2)) - abs.eval(0.5, &x, &v);
        let lhs = 2.0 * (&x - &x).dot(&(&cert.p * drift));
        assert_eq!(lhs, 0.0);
        assert!(cert.sigma1(examples::EX1_ETA) > 0.0);
    }

    #[test]
    fn falsifier_first_example() {
        let (sys, abs, iface, cert) = examples::example1_setup(examples::EX1_ETA).unwrap();
        let domain = FalsifierDomain {
            states: Aabb::symmetric(2, 5.0).unwrap(),
            time: (0.0, 10.0),
            inputs: Aabb::symmetric(2, 5.0).unwrap(),
        };
        let verdict = falsify_cgps_lyapunov(&sys, &abs, &iface, &cert, &domain, Sampling::default())
            .unwrap();
        assert!(verdict.passed(), "{verdict:?}");

        let bad = cert.with_alpha(10.0, &examples::example1_system().b).unwrap();
        let verdict =
            falsify_cgps_lyapunov(&sys, &abs, &iface, &bad, &domain, Sampling::default()).unwrap();
        assert!(!verdict.passed());
    }

    #[test]
    fn trivial_bounds() {
        let b = Matrix::identity(2, 2);
        let cert = Certificate::new(Matrix::identity(2, 2), Matrix::zeros(2, 2), 0.8, Matrix::zeros(0, 0), &b)
            .unwrap();
        let c = Matrix::identity(2, 2) * 2.0;
        assert_eq!(eta_bound(&cert, &c, 0.5, 0.0).unwrap(), 0.5 / (2.0 * 2.0));
        assert_eq!(disturbance_bound(&cert, &c, 0.5).unwrap(), 0.8 * 0.5 / (2.0 * 2.0));
    }

    #[test]
    fn eta_bound_disturbance_too_large() {
        let cert = examples::example1_certificate().unwrap();
        let c = Matrix::identity(2, 2);
        // prefactor = eps - 2 w / alpha vanishes at w = alpha eps / 2.
        let w = 3.7 * 0.5 / 2.0;
        assert!(matches!(
            eta_bound(&cert, &c, 0.5, w),
            Err(CertError::DisturbanceTooLarge(_))
        ));
        assert!(eta_bound(&cert, &c, 0.5, 0.99 * w).is_ok());
    }

    #[test]
    fn eta_bound_monotonicity() {
        let cert = examples::example2_certificate().unwrap();
        let c = Matrix::identity(2, 2);
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let w = i as f64 * 0.005;
            let e = eta_bound(&cert, &c, 1.0, w).unwrap();
            assert!(e < prev);
            prev = e;
        }
        let mut prev = 0.0;
        for i in 0..20 {
            let e = eta_bound(&cert, &c, 0.6 + 0.2 * i as f64, 0.05).unwrap();
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn disturbance_bound_is_linear() {
        let cert = examples::example2_certificate().unwrap();
        let c = Matrix::identity(2, 2);
        let a = disturbance_bound(&cert, &c, 1.0).unwrap();
        let b = disturbance_bound(&cert, &c, 2.0).unwrap();
        assert_eq!(b, 2.0 * a);
        assert!(a > 0.05 * 2f64.sqrt());
    }

    #[test]
    fn eta_condition_cases() {
        let g = examples::example1_certificate().unwrap().gains();
        assert!(theorem2_eta_condition(&g, 1.0, 1e-6, 0.0, 0.0));
        assert!(theorem2_eta_condition(&g, 1.0, 0.5, 0.01, 0.0));
        let mut last = false;
        for i in (0..60).rev() {
            let now = theorem2_eta_condition(&g, 1.0, 0.5, 0.005 * i as f64, 0.0);
            // Once true it stays true as eta shrinks.
            assert!(!last || now);
            last = now;
        }
    }

    #[test]
    fn kl_envelope_properties() {
        let cert = Certificate::new(
            Matrix::identity(2, 2),
            Matrix::zeros(2, 2),
            1.0,
            Matrix::zeros(0, 0),
            &Matrix::identity(2, 2),
        )
        .unwrap();
        assert_eq!(kl_envelope(&cert, 0.3, 0.0, 0.0, 0.0), 0.3);
        let c1 = examples::example1_certificate().unwrap();
        let e0 = kl_envelope(&c1, 0.18, 0.18, 0.0, 0.0);
        let e1 = kl_envelope(&c1, 0.18, 0.18, 0.0, 1.0);
        assert!(e1 < e0);
        let k = KLBound::new(&c1, 0.18, 0.0);
        assert!(k.beta(0.5, 0.0) >= 0.5);
        assert!(k.beta(0.5, 100.0) < 1e-6);
        assert!(k.beta(0.6, 1.0) > k.beta(0.5, 1.0));
    }

    #[test]
    fn input_map_cases() {
        let b = Matrix::identity(2, 2);
        let zero_gain =
            Certificate::new(Matrix::identity(2, 2), Matrix::zeros(2, 2), 1.0, Matrix::zeros(0, 0), &b)
                .unwrap();
        let u = InputSet::Box(Aabb::symmetric(2, 5.0).unwrap());
        let spec = admissible_input_map(&u, &zero_gain, 0.15, 0.1).unwrap();
        assert_eq!(spec.margin, 0.0);
        assert_eq!(spec.shrunk, u);

        let spec = admissible_input_map(&InputSet::Unbounded(2), &zero_gain, 0.15, 0.1).unwrap();
        assert_eq!(spec.shrunk, InputSet::Unbounded(2));

        let cert = examples::example2_certificate().unwrap();
        let w_bar = 0.05 * 2f64.sqrt();
        let spec = admissible_input_map(&u, &cert, 0.15, w_bar).unwrap();
        assert!(spec.margin <= 1.5);
        let inner = Aabb::symmetric(2, 3.5).unwrap();
        assert!(inner.is_inside(spec.shrunk.as_box().unwrap()));

        assert!(matches!(
            admissible_input_map(&u, &cert, 2.0, w_bar),
            Err(CertError::EmptyInputMap { .. })
        ));
    }

    #[test]
    fn certificate_file_round_trip() {
        let cert = examples::example2_certificate().unwrap();
        let text = cert.to_file().to_toml_string().unwrap();
        let back = CertificateFile::from_toml_str(&text)
            .unwrap()
            .into_certificate(&Matrix::identity(2, 2))
            .unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn malformed_certificate_file() {
        let text = "alpha = 1.0\np = [[1.0, 0.0], [0.0]]\nl = [[0.0, 0.0], [0.0, 0.0]]\nm = []\n";
        let f = CertificateFile::from_toml_str(text).unwrap();
        assert!(matches!(
            f.into_certificate(&Matrix::identity(2, 2)),
            Err(CertError::MalformedMatrix(_))
        ));
    }
}
