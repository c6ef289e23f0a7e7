//! Axis-aligned boxes, used for input sets, disturbance sets, lattice cells
//! and planner regions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::Vector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("box bounds have different lengths ({lo} vs {hi})")]
    LengthMismatch { lo: usize, hi: usize },
    #[error("box bound on axis {axis} is inverted or non-finite: [{lo}, {hi}]")]
    InvalidBound { axis: usize, lo: f64, hi: f64 },
}

/// Closed axis-aligned box `[lo_1, hi_1] x ... x [lo_n, hi_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct Aabb {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl TryFrom<RawBox> for Aabb {
    type Error = BoxError;
    fn try_from(raw: RawBox) -> Result<Self, BoxError> {
        Aabb::new(raw.lo, raw.hi)
    }
}

impl From<Aabb> for RawBox {
    fn from(b: Aabb) -> Self {
        RawBox { lo: b.lo, hi: b.hi }
    }
}

impl Aabb {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, BoxError> {
        if lo.len() != hi.len() {
            return Err(BoxError::LengthMismatch {
                lo: lo.len(),
                hi: hi.len(),
            });
        }
        for (axis, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(BoxError::InvalidBound { axis, lo: l, hi: h });
            }
        }
        Ok(Self { lo, hi })
    }

    /// `[-r, r]^n`.
    pub fn symmetric(n: usize, r: f64) -> Result<Self, BoxError> {
        Self::new(vec![-r; n], vec![r; n])
    }

    /// The degenerate box `{0}` in `n` dimensions.
    pub fn origin(n: usize) -> Self {
        Self {
            lo: vec![0.0; n],
            hi: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn center(&self) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)),
        )
    }

    pub fn is_degenerate_point(&self) -> bool {
        self.lo == self.hi
    }

    /// Membership with slack `tol` on every face.
    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    /// True iff `self` lies inside `other`.
    pub fn is_inside(&self, other: &Aabb) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| self.lo[i] >= other.lo[i] && self.hi[i] <= other.hi[i])
    }

    /// Closed-box intersection test (touching faces count).
    pub fn intersects(&self, other: &Aabb) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| self.lo[i] <= other.hi[i] && other.lo[i] <= self.hi[i])
    }

    /// Every face pushed outward by `margin`.
    pub fn inflate(&self, margin: f64) -> Aabb {
        Aabb {
            lo: self.lo.iter().map(|l| l - margin).collect(),
            hi: self.hi.iter().map(|h| h + margin).collect(),
        }
    }

    /// Every face pulled inward by `margin`; `None` when the result is empty.
    pub fn shrink(&self, margin: f64) -> Option<Aabb> {
        let lo: Vec<f64> = self.lo.iter().map(|l| l + margin).collect();
        let hi: Vec<f64> = self.hi.iter().map(|h| h - margin).collect();
        if lo.iter().zip(&hi).all(|(l, h)| l <= h) {
            Some(Aabb { lo, hi })
        } else {
            None
        }
    }

    /// Largest Euclidean norm over the box, attained at a corner.
    pub fn max_norm(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| l.abs().max(h.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Componentwise projection onto the box.
    pub fn clamp(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            self.dim(),
            x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .map(|(v, (l, h))| v.clamp(*l, *h)),
        )
    }

    /// Uniform sample; degenerate axes return their single value.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(l, h)| {
                if l == h {
                    *l
                } else {
                    rng.random_range(*l..=*h)
                }
            }),
        )
    }
}
