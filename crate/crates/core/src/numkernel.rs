//! Small dense numerics: symmetric eigensolve, definiteness, norms, the
//! continuous algebraic Riccati equation, and fixed-step RK4.
//!
//! Every matrix handled here is tiny (at most 8x8 in practice), so the
//! routines favour robustness and determinism over speed.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative asymmetry accepted by [`sym_eigen`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Jacobi sweeps stop once the off-diagonal Frobenius mass drops below this
/// fraction of the matrix Frobenius norm.
pub const JACOBI_TOL: f64 = 1e-13;
/// Any state entry larger than this in magnitude aborts integration.
pub const BLOW_UP_LIMIT: f64 = 1e12;
/// Default RK4 step.
pub const DEFAULT_DT: f64 = 1e-3;

const JACOBI_MAX_SWEEPS: usize = 100;
const KLEINMAN_MAX_ITERS: usize = 200;
const RICCATI_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NonSymmetric(f64),
    #[error("non-finite or diverging value{}", fmt_time(*.0))]
    NonFinite(Option<f64>),
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Riccati iteration did not converge (residual {residual:e} after {iterations} iterations)")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("no stabilizing initial gain of the form c*B^T was found")]
    NotStabilizable,
    #[error("singular linear system")]
    Singular,
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("invalid time span [{0}, {1}]")]
    InvalidSpan(f64, f64),
}

fn fmt_time(t: Option<f64>) -> String {
    match t {
        Some(t) => format!(" at t = {t}"),
        None => String::new(),
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymSpectrum {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in eigenvalue order.
    pub eigenvectors: Matrix,
}

impl SymSpectrum {
    pub fn min(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    /// Largest eigenvalue magnitude (the spectral norm of the source matrix).
    pub fn max_abs(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    /// Q diag(lambda) Q^T.
    pub fn reconstruct(&self) -> Matrix {
        let d = Matrix::from_diagonal(&Vector::from_vec(self.eigenvalues.clone()));
        &self.eigenvectors * d * self.eigenvectors.transpose()
    }
}

fn ensure_square(m: &Matrix) -> Result<usize, NumError> {
    if m.nrows() != m.ncols() {
        return Err(NumError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

fn ensure_finite(m: &Matrix) -> Result<(), NumError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite(None))
    }
}

/// Maximum entrywise asymmetry relative to the largest entry.
pub fn relative_asymmetry(m: &Matrix) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Symmetric eigensolve by cyclic Jacobi rotations.
pub fn sym_eigen(m: &Matrix) -> Result<SymSpectrum, NumError> {
    let n = ensure_square(m)?;
    ensure_finite(m)?;
    let asym = relative_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(NumError::NonSymmetric(asym));
    }

    // Work on the exactly symmetrized copy.
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = Matrix::identity(n, n);
    let total = a.norm();
    let threshold = JACOBI_TOL * total;

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymSpectrum {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

// A <- J^T A J and V <- V J for the rotation in the (p, q) plane.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// True iff the largest eigenvalue of `m` is at most `tol`.
pub fn is_negative_semidefinite(m: &Matrix, tol: f64) -> Result<bool, NumError> {
    Ok(sym_eigen(m)?.max() <= tol)
}

/// Spectral norm of a symmetric matrix: largest eigenvalue magnitude.
pub fn sym_spectral_norm(m: &Matrix) -> Result<f64, NumError> {
    Ok(sym_eigen(m)?.max_abs())
}

/// Spectral norm (largest singular value) of an arbitrary matrix.
pub fn spectral_norm(m: &Matrix) -> Result<f64, NumError> {
    if m.is_empty() {
        return Ok(0.0);
    }
    ensure_finite(m)?;
    let gram = m.transpose() * m;
    Ok(sym_eigen(&gram)?.max().max(0.0).sqrt())
}

/// Largest real part among the eigenvalues of a general square matrix.
pub fn spectral_abscissa(m: &Matrix) -> Result<f64, NumError> {
    let n = ensure_square(m)?;
    ensure_finite(m)?;
    if n == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), 1e-14, 10_000)
        .ok_or(NumError::NoConvergence {
            iterations: 10_000,
            residual: f64::NAN,
        })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .fold(f64::NEG_INFINITY, |acc, z| acc.max(z.re)))
}

/// Solves the continuous Lyapunov equation `A^T X + X A + Q = 0` by
/// vectorization into an `n^2` linear system.
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix, NumError> {
    let n = ensure_square(a)?;
    if q.shape() != (n, n) {
        return Err(NumError::DimensionMismatch(format!(
            "Lyapunov: A is {n}x{n} but Q is {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    let eye = Matrix::identity(n, n);
    let at = a.transpose();
    // Column-major vec: vec(A^T X) = (I kron A^T) vec X, vec(X A) = (A^T kron I) vec X.
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -Vector::from_column_slice(q.as_slice());
    let sol = op.lu().solve(&rhs).ok_or(NumError::Singular)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(NumError::Singular);
    }
    let x = Matrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Residual `A^T P + P A - P B B^T P + Q` of the Riccati equation.
pub fn riccati_residual(a: &Matrix, b: &Matrix, q: &Matrix, p: &Matrix) -> Matrix {
    a.transpose() * p + p * a - p * b * b.transpose() * p + q
}

/// Stabilizing solution of `A^T P + P A - P B B^T P + Q = 0` by Kleinman
/// iteration, seeded with the first gain `c B^T` (c = 1, 2, 4, ...) that
/// makes `A - B K` Hurwitz.
pub fn solve_riccati(a: &Matrix, b: &Matrix, q: &Matrix) -> Result<Matrix, NumError> {
    let n = ensure_square(a)?;
    if b.nrows() != n || q.shape() != (n, n) {
        return Err(NumError::DimensionMismatch(format!(
            "Riccati: A is {n}x{n}, B is {}x{}, Q is {}x{}",
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    ensure_finite(a)?;
    ensure_finite(b)?;
    ensure_finite(q)?;

    let bt = b.transpose();
    let mut gain = None;
    let mut c = 1.0;
    for _ in 0..40 {
        let k = &bt * c;
        if spectral_abscissa(&(a - b * &k))? < 0.0 {
            gain = Some(k);
            break;
        }
        c *= 2.0;
    }
    let mut k = gain.ok_or(NumError::NotStabilizable)?;

    let mut p_prev: Option<Matrix> = None;
    let mut last_step = f64::INFINITY;
    for iter in 0..KLEINMAN_MAX_ITERS {
        let closed = a - b * &k;
        let rhs = q + k.transpose() * &k;
        let p = solve_lyapunov(&closed, &rhs)?;
        k = &bt * &p;
        if let Some(prev) = &p_prev {
            let step = (&p - prev).norm();
            // Quadratic convergence stalls at rounding level.
            if step <= 1e-14 * p.norm().max(1.0) || (iter >= 5 && step >= last_step) {
                return finish_riccati(a, b, q, p, iter + 1);
            }
            last_step = step;
        }
        p_prev = Some(p);
    }
    let p = p_prev.expect("at least one Kleinman iteration");
    finish_riccati(a, b, q, p, KLEINMAN_MAX_ITERS)
}

fn finish_riccati(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    p: Matrix,
    iterations: usize,
) -> Result<Matrix, NumError> {
    let residual = riccati_residual(a, b, q, &p).norm();
    if residual > RICCATI_RESIDUAL_TOL || !residual.is_finite() {
        return Err(NumError::NoConvergence {
            iterations,
            residual,
        });
    }
    Ok(p)
}

/// Sample times `t0, t0 + dt, ..., t1`; the last step is shortened when
/// `dt` does not divide the span.
pub fn time_grid(t0: f64, t1: f64, dt: f64) -> Result<Vec<f64>, NumError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(NumError::InvalidStep(dt));
    }
    if !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(NumError::InvalidSpan(t0, t1));
    }
    let slack = 1e-9 * dt;
    let mut times = Vec::with_capacity(((t1 - t0) / dt) as usize + 2);
    let mut k: u64 = 0;
    loop {
        let t = t0 + k as f64 * dt;
        if t >= t1 - slack {
            times.push(t1);
            break;
        }
        times.push(t);
        k += 1;
    }
    Ok(times)
}

/// Errors unless every entry is finite and below [`BLOW_UP_LIMIT`].
pub fn check_state(x: &Vector, t: f64) -> Result<(), NumError> {
    if x.iter().all(|v| v.is_finite() && v.abs() <= BLOW_UP_LIMIT) {
        Ok(())
    } else {
        Err(NumError::NonFinite(Some(t)))
    }
}

/// One classical Runge-Kutta step of size `h` from `(t, x)`.
pub fn rk4_step<E, F>(field: &mut F, t: f64, x: &Vector, h: f64) -> Result<Vector, E>
where
    F: FnMut(f64, &Vector) -> Result<Vector, E>,
{
    let half = 0.5 * h;
    let k1 = field(t, x)?;
    let k2 = field(t + half, &(x + &k1 * half))?;
    let k3 = field(t + half, &(x + &k2 * half))?;
    let k4 = field(t + h, &(x + &k3 * h))?;
    Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

/// Sampled solution of an ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
}

impl OdeSolution {
    pub fn last(&self) -> &Vector {
        self.states.last().expect("solution has at least one sample")
    }
}

/// Integrates `x' = field(t, x)` with fixed-step RK4 on `t_span`.
pub fn integrate_rk4<E, F>(
    mut field: F,
    x0: &Vector,
    t_span: (f64, f64),
    dt: f64,
) -> Result<OdeSolution, E>
where
    F: FnMut(f64, &Vector) -> Result<Vector, E>,
    E: From<NumError>,
{
    let times = time_grid(t_span.0, t_span.1, dt)?;
    check_state(x0, times[0])?;
    let mut states = Vec::with_capacity(times.len());
    states.push(x0.clone());
    for w in times.windows(2) {
        let x = states.last().expect("nonempty");
        let next = rk4_step(&mut field, w[0], x, w[1] - w[0])?;
        check_state(&next, w[1])?;
        states.push(next);
    }
    Ok(OdeSolution { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn eigen_identity_and_diagonal() {
        let s = sym_eigen(&Matrix::identity(2, 2)).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0, 1.0]);
        let s = sym_eigen(&mat(2, 2, &[0.15, 0.0, 0.0, 0.05])).unwrap();
        assert_eq!(s.eigenvalues, vec![0.05, 0.15]);
    }

    #[test]
    fn eigen_rejects_asymmetric_and_nan() {
        let m = mat(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eigen(&m), Err(NumError::NonSymmetric(_))));
        let m = mat(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
        assert!(matches!(sym_eigen(&m), Err(NumError::NonFinite(None))));
        assert!(matches!(
            sym_eigen(&Matrix::zeros(2, 3)),
            Err(NumError::NotSquare { .. })
        ));
    }

    #[test]
    fn eigen_reconstructs_dense_matrix() {
        let m = mat(
            3,
            3,
            &[4.0, 1.0, -2.0, 1.0, 2.0, 0.5, -2.0, 0.5, -3.0],
        );
        let s = sym_eigen(&m).unwrap();
        assert!((s.reconstruct() - &m).norm() < 1e-12);
        let qtq = s.eigenvectors.transpose() * &s.eigenvectors;
        assert!((qtq - Matrix::identity(3, 3)).norm() < 1e-12);
        assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn empty_matrix_has_empty_spectrum() {
        let s = sym_eigen(&Matrix::zeros(0, 0)).unwrap();
        assert!(s.eigenvalues.is_empty());
        assert!(is_negative_semidefinite(&Matrix::zeros(0, 0), 1e-9).unwrap());
    }

    #[test]
    fn negative_semidefinite_cases() {
        assert!(is_negative_semidefinite(&Matrix::zeros(2, 2), 1e-9).unwrap());
        assert!(is_negative_semidefinite(&mat(2, 2, &[-0.1, 0.0, 0.0, -0.3]), 1e-9).unwrap());
        assert!(!is_negative_semidefinite(&mat(2, 2, &[0.01, 0.0, 0.0, -1.0]), 1e-9).unwrap());
    }

    #[test]
    fn composite_block_of_first_example_is_nsd() {
        // [[diag(-1.1, -1.3), I], [I, -I]]; Schur complement diag(-0.1, -0.3).
        let m = mat(
            4,
            4,
            &[
                -1.1, 0.0, 1.0, 0.0, //
                0.0, -1.3, 0.0, 1.0, //
                1.0, 0.0, -1.0, 0.0, //
                0.0, 1.0, 0.0, -1.0,
            ],
        );
        let s = sym_eigen(&m).unwrap();
        assert!(s.max() <= 0.0);
        assert!(is_negative_semidefinite(&m, 1e-9).unwrap());
    }

    #[test]
    fn spectral_norms() {
        assert_eq!(spectral_norm(&(Matrix::identity(2, 2) * -5.4)).unwrap(), 5.4);
        let m = mat(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        assert!((spectral_norm(&m).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(sym_spectral_norm(&mat(2, 2, &[-3.0, 0.0, 0.0, 1.0])).unwrap(), 3.0);
    }

    #[test]
    fn spectral_abscissa_of_triangular() {
        let m = mat(2, 2, &[-1.0, 5.0, 0.0, 0.5]);
        assert!((spectral_abscissa(&m).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_scalar() {
        // -2x + 1 = 0
        let x = solve_lyapunov(&mat(1, 1, &[-1.0]), &mat(1, 1, &[1.0])).unwrap();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn riccati_zero_drift_gives_identity() {
        let p = solve_riccati(
            &Matrix::zeros(2, 2),
            &Matrix::identity(2, 2),
            &Matrix::identity(2, 2),
        )
        .unwrap();
        assert!((p - Matrix::identity(2, 2)).amax() <= 1e-12);
    }

    #[test]
    fn riccati_stable_diagonal() {
        // -p^2 - 2p + 1 = 0 per axis.
        let p = solve_riccati(
            &(Matrix::identity(2, 2) * -1.0),
            &Matrix::identity(2, 2),
            &Matrix::identity(2, 2),
        )
        .unwrap();
        let expected = Matrix::identity(2, 2) * (2f64.sqrt() - 1.0);
        assert!((p - expected).amax() < 1e-12);
    }

    #[test]
    fn riccati_second_example_residual() {
        let a = mat(2, 2, &[0.2, 0.3, 0.5, -0.5]);
        let b = Matrix::identity(2, 2);
        let q = Matrix::identity(2, 2);
        let p = solve_riccati(&a, &b, &q).unwrap();
        assert!(riccati_residual(&a, &b, &q, &p).norm() <= 1e-8);
        let s = sym_eigen(&p).unwrap();
        assert!(s.min() > 0.0);
        assert!(relative_asymmetry(&p) == 0.0);
    }

    #[test]
    fn riccati_not_stabilizable() {
        // Unstable mode with no input authority.
        let a = mat(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = mat(2, 1, &[0.0, 1.0]);
        let err = solve_riccati(&a, &b, &Matrix::identity(2, 2)).unwrap_err();
        assert_eq!(err, NumError::NotStabilizable);
    }

    #[test]
    fn time_grid_shortens_last_step() {
        let g = time_grid(0.0, 1.0, 0.3).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        let g = time_grid(0.0, 1.0, 1e-3).unwrap();
        assert_eq!(g.len(), 1001);
        assert!(time_grid(0.0, 1.0, 0.0).is_err());
        assert!(time_grid(1.0, 0.0, 0.1).is_err());
    }

    fn constant_field(_: f64, x: &Vector) -> Result<Vector, NumError> {
        Ok(Vector::zeros(x.len()))
    }

    #[test]
    fn rk4_constant_field() {
        let x0 = Vector::from_vec(vec![1.0, 2.0]);
        let sol = integrate_rk4(constant_field, &x0, (0.0, 1.0), DEFAULT_DT).unwrap();
        assert!(sol.states.iter().all(|x| x == &x0));
    }

    #[test]
    fn rk4_exponential_decay() {
        let x0 = Vector::from_vec(vec![1.0]);
        let sol = integrate_rk4(
            |_, x: &Vector| Ok::<_, NumError>(-x),
            &x0,
            (0.0, 1.0),
            1e-3,
        )
        .unwrap();
        assert!((sol.last()[0] - (-1f64).exp()).abs() <= 1e-9);
    }

    #[test]
    fn rk4_diagonal_drift() {
        let a = mat(2, 2, &[0.15, 0.0, 0.0, 0.05]);
        let x0 = Vector::from_vec(vec![1.0, 1.0]);
        let sol = integrate_rk4(
            |_, x: &Vector| Ok::<_, NumError>(&a * x),
            &x0,
            (0.0, 1.0),
            DEFAULT_DT,
        )
        .unwrap();
        assert!((sol.last()[0] - 0.15f64.exp()).abs() <= 1e-9);
        assert!((sol.last()[1] - 0.05f64.exp()).abs() <= 1e-9);
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let err = |dt: f64| {
            let sol = integrate_rk4(
                |_, x: &Vector| Ok::<_, NumError>(-x),
                &Vector::from_vec(vec![1.0]),
                (0.0, 1.0),
                dt,
            )
            .unwrap();
            (sol.last()[0] - (-1f64).exp()).abs()
        };
        let coarse = err(0.1);
        let fine = err(0.05);
        assert!(coarse / fine >= 8.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn rk4_blow_up_is_reported() {
        let res = integrate_rk4(
            |_, x: &Vector| Ok::<_, NumError>(x.map(|v| v * v)),
            &Vector::from_vec(vec![1.0]),
            (0.0, 2.0),
            1e-3,
        );
        assert!(matches!(res, Err(NumError::NonFinite(Some(_)))));
    }
}
