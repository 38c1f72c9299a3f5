//! Periodic trajectories and their algebra.
//!
//! A [`PeriodicTrajectory`] is a cyclic sequence of `T` vectors of a fixed
//! dimension. Indexing is total: any step index is reduced modulo `T`, so a
//! trajectory can be read arbitrarily far into the future.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory must contain at least one step")]
    Empty,
    #[error("step {index} has dimension {got}, expected {expected}")]
    InconsistentDimension {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("trajectory mismatch: period {period_a}x{dim_a} vs {period_b}x{dim_b}")]
    ShapeMismatch {
        period_a: usize,
        dim_a: usize,
        period_b: usize,
        dim_b: usize,
    },
    #[error("flat data length {got} does not equal period {period} * dim {dim}")]
    BadFlatLength { got: usize, period: usize, dim: usize },
}

/// A `T`-step cyclic sequence of vectors with mod-`T` indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicTrajectory {
    dim: usize,
    steps: Vec<DVector<f64>>,
}

impl PeriodicTrajectory {
    pub fn new(steps: Vec<DVector<f64>>) -> Result<Self, TrajectoryError> {
        let first = steps.first().ok_or(TrajectoryError::Empty)?;
        let dim = first.len();
        for (index, s) in steps.iter().enumerate() {
            if s.len() != dim {
                return Err(TrajectoryError::InconsistentDimension {
                    index,
                    got: s.len(),
                    expected: dim,
                });
            }
        }
        Ok(Self { dim, steps })
    }

    /// Trajectory holding the same vector at every step.
    pub fn constant(period: usize, value: DVector<f64>) -> Self {
        assert!(period >= 1, "period must be positive");
        Self {
            dim: value.len(),
            steps: vec![value; period],
        }
    }

    /// Build from a flat row-major array (step 0 first).
    pub fn from_flat(period: usize, dim: usize, data: &[f64]) -> Result<Self, TrajectoryError> {
        if period == 0 {
            return Err(TrajectoryError::Empty);
        }
        if data.len() != period * dim {
            return Err(TrajectoryError::BadFlatLength {
                got: data.len(),
                period,
                dim,
            });
        }
        let steps = data
            .chunks_exact(dim)
            .map(DVector::from_column_slice)
            .collect();
        Ok(Self { dim, steps })
    }

    /// Flat row-major serialization (step 0 first).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.period() * self.dim);
        for s in &self.steps {
            out.extend(s.iter().copied());
        }
        out
    }

    pub fn period(&self) -> usize {
        self.steps.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Step `k`, reduced modulo the period.
    pub fn at(&self, k: usize) -> &DVector<f64> {
        &self.steps[k % self.steps.len()]
    }

    pub fn steps(&self) -> &[DVector<f64>] {
        &self.steps
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.steps.iter()
    }

    /// Rotate by one step: `result(k) = self(k + 1 mod T)`.
    pub fn shift(&self) -> Self {
        let mut steps = Vec::with_capacity(self.steps.len());
        for k in 0..self.steps.len() {
            steps.push(self.at(k + 1).clone());
        }
        Self {
            dim: self.dim,
            steps,
        }
    }

    fn check_shape(&self, other: &Self) -> Result<(), TrajectoryError> {
        if self.period() != other.period() || self.dim != other.dim {
            return Err(TrajectoryError::ShapeMismatch {
                period_a: self.period(),
                dim_a: self.dim,
                period_b: other.period(),
                dim_b: other.dim,
            });
        }
        Ok(())
    }
}

/// Sum of squared distances between `a` and the one-step rotation of `b`:
/// `sum_k ||a(k) - b(k+1)||^2`.
///
/// Zero exactly when `a` continues `b`'s orbit, i.e. `a = shift(b)`. This is
/// the drift penalty that forces artificial references to settle onto a fixed
/// periodic orbit.
pub fn shifted_sq_distance(
    a: &PeriodicTrajectory,
    b: &PeriodicTrajectory,
) -> Result<f64, TrajectoryError> {
    a.check_shape(b)?;
    let mut total = 0.0;
    for k in 0..a.period() {
        total += (a.at(k) - b.at(k + 1)).norm_squared();
    }
    Ok(total)
}

/// Sum of Euclidean distances between aligned steps: `sum_k ||a(k) - b(k)||`.
///
/// Note: plain norms, not squared norms.
pub fn stepwise_distance(
    a: &PeriodicTrajectory,
    b: &PeriodicTrajectory,
) -> Result<f64, TrajectoryError> {
    a.check_shape(b)?;
    let mut total = 0.0;
    for k in 0..a.period() {
        total += (a.at(k) - b.at(k)).norm();
    }
    Ok(total)
}

/// Largest componentwise deviation between aligned steps.
pub fn max_abs_difference(
    a: &PeriodicTrajectory,
    b: &PeriodicTrajectory,
) -> Result<f64, TrajectoryError> {
    a.check_shape(b)?;
    let mut worst: f64 = 0.0;
    for k in 0..a.period() {
        worst = worst.max((a.at(k) - b.at(k)).amax());
    }
    Ok(worst)
}

/// Flat wire representation: `(T, p)` header plus row-major data.
#[derive(Serialize, Deserialize)]
struct TrajectoryRepr {
    period: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Serialize for PeriodicTrajectory {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TrajectoryRepr {
            period: self.period(),
            dim: self.dim,
            data: self.to_flat(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PeriodicTrajectory {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = TrajectoryRepr::deserialize(deserializer)?;
        PeriodicTrajectory::from_flat(repr.period, repr.dim, &repr.data)
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(vals: &[&[f64]]) -> PeriodicTrajectory {
        PeriodicTrajectory::new(vals.iter().map(|v| DVector::from_column_slice(v)).collect())
            .unwrap()
    }

    #[test]
    fn shift_rotates_by_one() {
        let t = traj(&[&[1.0], &[2.0], &[3.0]]);
        let s = t.shift();
        assert_eq!(s, traj(&[&[2.0], &[3.0], &[1.0]]));
    }

    #[test]
    fn shift_single_step_is_identity() {
        let t = traj(&[&[7.0]]);
        assert_eq!(t.shift(), t);
    }

    #[test]
    fn shift_twice_period_two_is_identity() {
        let t = traj(&[&[4.0, -1.0], &[0.5, 2.0]]);
        assert_eq!(t.shift().shift(), t);
    }

    #[test]
    fn mod_indexing_is_total() {
        let t = traj(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(t.at(5), t.at(2));
        assert_eq!(t.at(3), t.at(0));
    }

    #[test]
    fn shifted_sq_distance_of_shift_is_zero() {
        let b = traj(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 0.5]]);
        let a = b.shift();
        assert_eq!(shifted_sq_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn shifted_sq_distance_hand_sum() {
        // sum over k of ||a(k) - b(k+1)||^2, with b identically zero: 1 + 4.
        let a = traj(&[&[1.0], &[2.0]]);
        let b = traj(&[&[0.0], &[0.0]]);
        assert_eq!(shifted_sq_distance(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn shifted_sq_distance_constant_trajectories() {
        let a = PeriodicTrajectory::constant(4, DVector::from_column_slice(&[2.5, -1.0]));
        assert_eq!(shifted_sq_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn stepwise_distance_hand_sum() {
        let a = traj(&[&[3.0], &[0.0]]);
        let b = traj(&[&[0.0], &[4.0]]);
        assert_eq!(stepwise_distance(&a, &b).unwrap(), 7.0);
    }

    #[test]
    fn stepwise_distance_identical_is_zero() {
        let a = traj(&[&[3.0, 1.0], &[0.0, -2.0]]);
        assert_eq!(stepwise_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn stepwise_distance_scales_homogeneously() {
        let a = traj(&[&[3.0], &[-1.0]]);
        let b = traj(&[&[0.5], &[4.0]]);
        let alpha = 3.25;
        let scale = |t: &PeriodicTrajectory| {
            PeriodicTrajectory::new(t.iter().map(|v| v * alpha).collect()).unwrap()
        };
        let lhs = stepwise_distance(&scale(&a), &scale(&b)).unwrap();
        let rhs = alpha * stepwise_distance(&a, &b).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = traj(&[&[1.0], &[2.0]]);
        let b = traj(&[&[1.0]]);
        assert!(matches!(
            shifted_sq_distance(&a, &b),
            Err(TrajectoryError::ShapeMismatch { .. })
        ));
        let c = traj(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert!(stepwise_distance(&a, &c).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let t = traj(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let flat = t.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = PeriodicTrajectory::from_flat(3, 2, &flat).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn json_round_trip() {
        let t = traj(&[&[1.5, -0.25], &[0.0, 7.0]]);
        let json = serde_json::to_string(&t).unwrap();
        let back: PeriodicTrajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}
