//! The state-space lattice with axis spacing `2 eta / sqrt(n)` and its
//! quantizer. Points are stored as integer index vectors so that hashing and
//! ordering are exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Aabb;
use crate::numkernel::Vector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatticeError {
    #[error("lattice dimension must be positive")]
    ZeroDimension,
    #[error("discretization parameter must be positive and finite, got {0}")]
    InvalidEta(f64),
    #[error("cannot quantize a non-finite vector")]
    NonFinite,
    #[error("vector has length {got}, lattice dimension is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("coordinate {0} is outside the representable index range")]
    OutOfRange(f64),
}

/// Lattice point identified by its integer index vector `k`; coordinates are
/// `k_i * spacing`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint {
    pub indices: Vec<i64>,
}

impl LatticePoint {
    pub fn new(indices: Vec<i64>) -> Self {
        Self { indices }
    }

    pub fn origin(n: usize) -> Self {
        Self {
            indices: vec![0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    /// Number of axis steps between two points.
    pub fn manhattan(&self, other: &LatticePoint) -> u64 {
        self.indices
            .iter()
            .zip(&other.indices)
            .map(|(a, b)| a.abs_diff(*b))
            .sum()
    }
}

/// Quantizer `Q_eta` onto the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    n: usize,
    eta: f64,
}

impl Quantizer {
    pub fn new(n: usize, eta: f64) -> Result<Self, LatticeError> {
        if n == 0 {
            return Err(LatticeError::ZeroDimension);
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(LatticeError::InvalidEta(eta));
        }
        Ok(Self { n, eta })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Axis spacing `2 eta / sqrt(n)`.
    pub fn spacing(&self) -> f64 {
        2.0 * self.eta / (self.n as f64).sqrt()
    }

    /// Per-axis quantization bound `eta / sqrt(n)`.
    pub fn half_width(&self) -> f64 {
        self.eta / (self.n as f64).sqrt()
    }

    /// Nearest lattice point; ties round half away from zero.
    pub fn quantize(&self, x: &Vector) -> Result<LatticePoint, LatticeError> {
        if x.len() != self.n {
            return Err(LatticeError::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        let spacing = self.spacing();
        let indices = x
            .iter()
            .map(|&v| {
                if !v.is_finite() {
                    return Err(LatticeError::NonFinite);
                }
                let mut k = (v / spacing).round();
                if k.abs() >= 9.0e15 {
                    return Err(LatticeError::OutOfRange(v));
                }
                // The division can round across a cell boundary; step back
                // when the floating-point residual exceeds the half-width.
                let hw = 0.5 * spacing;
                if (v - k * spacing).abs() > hw {
                    let alt = k + (v - k * spacing).signum();
                    if (v - alt * spacing).abs() < (v - k * spacing).abs() {
                        k = alt;
                    }
                }
                Ok(k as i64)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LatticePoint { indices })
    }

    /// `Q_eta(x)` as a coordinate vector.
    pub fn quantize_coords(&self, x: &Vector) -> Result<Vector, LatticeError> {
        Ok(self.coordinates(&self.quantize(x)?))
    }

    pub fn coordinates(&self, p: &LatticePoint) -> Vector {
        let spacing = self.spacing();
        Vector::from_iterator(p.dim(), p.indices.iter().map(|&k| k as f64 * spacing))
    }

    /// Cell of `p`: the box centred at its coordinates with half-width
    /// `eta / sqrt(n)` per axis.
    pub fn cell_of(&self, p: &LatticePoint) -> Aabb {
        let hw = self.half_width();
        let c = self.coordinates(p);
        Aabb::new(
            c.iter().map(|v| v - hw).collect(),
            c.iter().map(|v| v + hw).collect(),
        )
        .expect("cell bounds are finite and ordered")
    }

    /// The `2n` axis neighbours, axis-major, minus before plus.
    pub fn neighbors(&self, p: &LatticePoint) -> Vec<LatticePoint> {
        let mut out = Vec::with_capacity(2 * p.dim());
        for axis in 0..p.dim() {
            for step in [-1, 1] {
                let mut q = p.clone();
                q.indices[axis] += step;
                out.push(q);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    #[test]
    fn constructor_validates() {
        assert_eq!(Quantizer::new(0, 0.1), Err(LatticeError::ZeroDimension));
        assert!(matches!(Quantizer::new(2, 0.0), Err(LatticeError::InvalidEta(_))));
        assert!(matches!(Quantizer::new(2, f64::NAN), Err(LatticeError::InvalidEta(_))));
    }

    #[test]
    fn quantize_hand_example() {
        let q = Quantizer::new(2, 0.18).unwrap();
        assert!((q.spacing() - 0.254_558_441_227_157).abs() < 1e-12);
        let x = v(&[0.3, -0.1]);
        let p = q.quantize(&x).unwrap();
        assert_eq!(p.indices, vec![1, 0]);
        let c = q.coordinates(&p);
        assert!((c[0] - 0.254_558_441_227_157).abs() < 1e-12);
        assert_eq!(c[1], 0.0);
        let d = (x - c).norm();
        assert!((d - 0.1098).abs() < 1e-4 && d <= 0.18);
    }

    #[test]
    fn quantize_lattice_point_is_fixed() {
        let q = Quantizer::new(3, 0.5).unwrap();
        let p = LatticePoint::new(vec![3, -2, 0]);
        assert_eq!(q.quantize(&q.coordinates(&p)).unwrap(), p);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let q = Quantizer::new(1, 0.5).unwrap(); // spacing 1
        assert_eq!(q.quantize(&v(&[0.5])).unwrap().indices, vec![1]);
        assert_eq!(q.quantize(&v(&[-0.5])).unwrap().indices, vec![-1]);
        assert_eq!(q.quantize(&v(&[2.5])).unwrap().indices, vec![3]);
    }

    #[test]
    fn quantize_errors() {
        let q = Quantizer::new(2, 0.1).unwrap();
        assert_eq!(q.quantize(&v(&[f64::NAN, 0.0])), Err(LatticeError::NonFinite));
        assert!(matches!(
            q.quantize(&v(&[0.0])),
            Err(LatticeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cell_geometry() {
        let q = Quantizer::new(2, 0.18).unwrap();
        let cell = q.cell_of(&LatticePoint::origin(2));
        assert!((cell.hi()[0] - 0.127_279_220_613_578_5).abs() < 1e-12);
        assert!((cell.lo()[1] + 0.127_279_220_613_578_5).abs() < 1e-12);
        let p = LatticePoint::new(vec![4, -7]);
        assert_eq!(q.quantize(&q.cell_of(&p).center()).unwrap(), p);

        let a = q.cell_of(&LatticePoint::new(vec![0, 0]));
        let b = q.cell_of(&LatticePoint::new(vec![1, 0]));
        assert!((a.hi()[0] - b.lo()[0]).abs() < 1e-15);
        assert_eq!(a.lo()[1], b.lo()[1]);
        assert_eq!(a.hi()[1], b.hi()[1]);
    }

    #[test]
    fn neighbor_order_and_symmetry() {
        let q = Quantizer::new(2, 0.1).unwrap();
        let n: Vec<Vec<i64>> = q
            .neighbors(&LatticePoint::origin(2))
            .into_iter()
            .map(|p| p.indices)
            .collect();
        assert_eq!(n, vec![vec![-1, 0], vec![1, 0], vec![0, -1], vec![0, 1]]);
        let q1 = Quantizer::new(1, 0.1).unwrap();
        assert_eq!(q1.neighbors(&LatticePoint::origin(1)).len(), 2);
        let p = LatticePoint::new(vec![2, -3]);
        for m in q.neighbors(&p) {
            assert!(q.neighbors(&m).contains(&p));
        }
    }
}
