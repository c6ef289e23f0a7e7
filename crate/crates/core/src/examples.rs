//! The two reference configurations.
//!
//! Example 1 is the time-varying plant `x' = A x + sin(x) / (t + 1) + u` with
//! `A = diag(0.15, 0.05)`, unconstrained inputs and no disturbance, linked to
//! its abstraction by `u = v - 5.4 (x_1 - x_2)`. The abstract input is the
//! stabilizing feedback `v = -2 x_hat_2`.
//!
//! Example 2 is the planar robot `x' = A x + u + w` with
//! `A = [0.2 0.3; 0.5 -0.5]`, `U = [-5, 5]^2`, `W = [-0.05, 0.05]^2` and the
//! interface `u = v - P (x_1 - x_2) / 2`, `P` solving the Riccati equation
//! with unit weights. Its decay rate is `1 / (2 lambda_max(P))`, the largest
//! value for which the certificate's matrix inequality holds. The planning
//! layout shipped here is a default, not a reproduction of any particular
//! figure.

use std::sync::Arc;

use crate::certificates::{self, CertError, Certificate};
use crate::geometry::Aabb;
use crate::hierarchy::ControlInterface;
use crate::lattice::Quantizer;
use crate::numkernel::{self, Matrix, NumError, Vector};
use crate::planner::Workspace;
use crate::systems::{
    AbstractSystem, ConcreteSystem, InputMap, InputSet, IqcSystem, Nonlinearity, Signal,
};

pub const EX1_EPSILON: f64 = 0.5;
pub const EX1_ETA: f64 = 0.18;
pub const EX1_ALPHA: f64 = 3.7;
pub const EX1_INTERFACE_GAIN: f64 = -5.4;
pub const EX1_HORIZON: f64 = 10.0;
pub const EX1_X0: [f64; 2] = [2.1, -1.9];
/// Gain of the abstract feedback `v = EX1_FEEDBACK * x_hat_2`.
pub const EX1_FEEDBACK: f64 = -2.0;

pub const EX2_EPSILON: f64 = 1.0;
pub const EX2_ETA: f64 = 0.15;
pub const EX2_INPUT_BOUND: f64 = 5.0;
pub const EX2_DISTURBANCE_BOUND: f64 = 0.05;
pub const EX2_INPUT_MAP_BOUND: f64 = 3.5;
pub const EX2_X0: [f64; 2] = [-2.5, -2.5];
pub const EX2_DT: f64 = 0.005;

pub fn example1_a() -> Matrix {
    Matrix::from_diagonal(&Vector::from_vec(vec![0.15, 0.05]))
}

/// `p(t, q) = sin(q) / (t + 1)` elementwise.
pub fn example1_nonlinearity() -> Nonlinearity {
    Arc::new(|t, q: &Vector| q.map(f64::sin) / (t + 1.0))
}

/// `[2 I, 0; 0, -I]`.
pub fn example1_multiplier() -> Matrix {
    Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 2.0, -1.0, -1.0]))
}

pub fn example1_system() -> IqcSystem {
    let i = Matrix::identity(2, 2);
    IqcSystem::new(
        example1_a(),
        i.clone(),
        i.clone(),
        i.clone(),
        i,
        Matrix::zeros(2, 2),
        example1_nonlinearity(),
        example1_multiplier(),
    )
    .expect("example 1 data is consistent")
}

pub fn example1_certificate() -> Result<Certificate, CertError> {
    Certificate::new(
        Matrix::identity(2, 2),
        Matrix::identity(2, 2) * EX1_INTERFACE_GAIN,
        EX1_ALPHA,
        example1_multiplier(),
        &Matrix::identity(2, 2),
    )
}

/// `v = -2 x_hat_2`.
pub fn example1_input() -> Signal {
    Signal::feedback(|_, x| x * EX1_FEEDBACK)
}

pub fn example1_x0() -> Vector {
    Vector::from_column_slice(&EX1_X0)
}

/// Concrete plant, abstraction on the lattice of `eta`, interface and
/// certificate of the first example.
pub fn example1_setup(
    eta: f64,
) -> Result<(ConcreteSystem, AbstractSystem, ControlInterface, Certificate), CertError> {
    let sys = example1_system().concrete(InputSet::Unbounded(2), Aabb::origin(2))?;
    let q = Quantizer::new(2, eta).map_err(crate::systems::SystemError::from)?;
    let abs = AbstractSystem::from_concrete(&sys, q, InputMap::Constant(InputSet::Unbounded(2)))?;
    let cert = example1_certificate()?;
    let iface = ControlInterface::affine(cert.l.clone());
    Ok((sys, abs, iface, cert))
}

pub fn example2_a() -> Matrix {
    Matrix::from_row_slice(2, 2, &[0.2, 0.3, 0.5, -0.5])
}

pub fn example2_system() -> IqcSystem {
    IqcSystem::linear(example2_a(), Matrix::identity(2, 2), Matrix::identity(2, 2))
        .expect("example 2 data is consistent")
}

/// Stabilizing solution of `A^T P + P A - P B B^T P + I = 0`.
pub fn example2_riccati() -> Result<Matrix, NumError> {
    let i = Matrix::identity(2, 2);
    numkernel::solve_riccati(&example2_a(), &i, &i)
}

/// `P` from the Riccati equation, `L = -B^T P / 2`, `alpha = 1 / (2 lambda_max(P))`.
pub fn example2_certificate() -> Result<Certificate, CertError> {
    certificates::riccati_certificate(&example2_system())
}

pub fn example2_input_set() -> InputSet {
    InputSet::Box(Aabb::symmetric(2, EX2_INPUT_BOUND).expect("finite bound"))
}

pub fn example2_disturbance_set() -> Aabb {
    Aabb::symmetric(2, EX2_DISTURBANCE_BOUND).expect("finite bound")
}

pub fn example2_input_map() -> InputSet {
    InputSet::Box(Aabb::symmetric(2, EX2_INPUT_MAP_BOUND).expect("finite bound"))
}

pub fn example2_x0() -> Vector {
    Vector::from_column_slice(&EX2_X0)
}

/// Concrete plant, abstraction with `U' = [-3.5, 3.5]^2` on the lattice of
/// `eta`, interface and certificate of the second example.
pub fn example2_setup(
    eta: f64,
) -> Result<(ConcreteSystem, AbstractSystem, ControlInterface, Certificate), CertError> {
    let sys = example2_system().concrete(example2_input_set(), example2_disturbance_set())?;
    let q = Quantizer::new(2, eta).map_err(crate::systems::SystemError::from)?;
    let abs = AbstractSystem::from_concrete(&sys, q, InputMap::Constant(example2_input_map()))?;
    let cert = example2_certificate()?;
    let iface = ControlInterface::affine(cert.l.clone());
    Ok((sys, abs, iface, cert))
}

fn rect(lo: [f64; 2], hi: [f64; 2]) -> Aabb {
    Aabb::new(lo.to_vec(), hi.to_vec()).expect("valid rectangle")
}

/// Default planning layout: three targets and three obstacles in `[-4, 4]^2`.
pub fn example2_workspace() -> Workspace {
    Workspace {
        bounds: rect([-4.0, -4.0], [4.0, 4.0]),
        obstacles: vec![
            rect([-0.5, -3.0], [0.5, -1.5]),
            rect([-2.5, 1.0], [-1.5, 2.0]),
            rect([1.5, 1.5], [2.5, 2.5]),
        ],
        targets: vec![
            rect([-4.0, -4.0], [-1.0, -1.0]),
            rect([-1.5, 1.0], [1.5, 4.0]),
            rect([1.0, -4.0], [4.0, -1.0]),
        ],
        epsilon: EX2_EPSILON,
    }
}
