//! Agent models: LTI dynamics, output maps, constraint boxes, tightened
//! reference boxes, and the lift from output trajectories to state/input
//! trajectories.

use crate::trajectory::PeriodicTrajectory;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::serde_util::serde_mat;

/// Tolerance on dynamics/output residuals when validating references.
/// One order above the QP solver tolerance so solver-produced references
/// validate cleanly.
pub const REFERENCE_RESIDUAL_TOL: f64 = 1e-8;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("agent {id}: {what} has shape {got_rows}x{got_cols}, expected {rows}x{cols}")]
    BadShape {
        id: AgentId,
        what: &'static str,
        got_rows: usize,
        got_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("agent {id}: {what} is not symmetric positive definite")]
    NotPositiveDefinite { id: AgentId, what: &'static str },
    #[error("agent {id}: bound vector {what} has length {got}, expected {expected}")]
    BadBoundDim {
        id: AgentId,
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("agent {id}: lower bound exceeds upper bound at coordinate {coord} of {what}")]
    EmptyBounds {
        id: AgentId,
        what: &'static str,
        coord: usize,
    },
    #[error(
        "agent {id}: tightened {what} bound at coordinate {coord} is not strictly inside the nominal bound"
    )]
    NotTightened {
        id: AgentId,
        what: &'static str,
        coord: usize,
    },
    #[error("dimension mismatch: got {got}, expected {expected} for {what}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(
        "no dynamics-consistent lift of the output trajectory exists (residual {residual:.3e})"
    )]
    InconsistentOutputTrajectory { residual: f64 },
}

/// Per-coordinate box `lower <= v <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn symmetric(limits: &[f64]) -> Self {
        Self {
            lower: limits.iter().map(|l| -l).collect(),
            upper: limits.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Signed margin to each face, positive inside: for coordinate `c`,
    /// `(v - lower, upper - v)`.
    pub fn margins(&self, v: &DVector<f64>) -> Vec<(f64, f64)> {
        (0..self.dim())
            .map(|c| (v[c] - self.lower[c], self.upper[c] - v[c]))
            .collect()
    }

    pub fn worst_margin(&self, v: &DVector<f64>) -> f64 {
        self.margins(v)
            .into_iter()
            .fold(f64::INFINITY, |acc, (lo, hi)| acc.min(lo).min(hi))
    }

    pub fn contains(&self, v: &DVector<f64>, slack: f64) -> bool {
        self.worst_margin(v) >= -slack
    }
}

/// Which constraint set a check refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSet {
    Nominal,
    Tightened,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalKind {
    State,
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSide {
    Lower,
    Upper,
}

/// Identifies one face of one constraint box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintId {
    pub set: BoundSet,
    pub signal: SignalKind,
    pub coord: usize,
    pub side: BoundSide,
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sig = match self.signal {
            SignalKind::State => "x",
            SignalKind::Input => "u",
        };
        let side = match self.side {
            BoundSide::Lower => "lower",
            BoundSide::Upper => "upper",
        };
        let set = match self.set {
            BoundSet::Nominal => "",
            BoundSet::Tightened => " (tightened)",
        };
        write!(f, "{sig}[{}] {side}{set}", self.coord)
    }
}

/// Signed margin of every box face for one `(x, u)` pair.
#[derive(Debug, Clone)]
pub struct ConstraintReport {
    pub margins: Vec<(ConstraintId, f64)>,
}

impl ConstraintReport {
    /// Entries violated beyond `slack` (margin < -slack).
    pub fn violations(&self, slack: f64) -> Vec<(ConstraintId, f64)> {
        self.margins
            .iter()
            .copied()
            .filter(|&(_, m)| m < -slack)
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.margins
            .iter()
            .fold(f64::INFINITY, |acc, &(_, m)| acc.min(m))
    }

    pub fn ok(&self, slack: f64) -> bool {
        self.violations(slack).is_empty()
    }
}

/// An LTI agent `x+ = A x + B u`, `y = C x + D u` with box constraints and
/// tightened reference boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    pub id: AgentId,
    #[serde(with = "serde_mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub c: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub d: DMatrix<f64>,
    pub state_bounds: BoxBounds,
    pub input_bounds: BoxBounds,
    pub ref_state_bounds: BoxBounds,
    pub ref_input_bounds: BoxBounds,
    #[serde(with = "serde_mat")]
    pub q_weight: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub r_weight: DMatrix<f64>,
}

impl AgentModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: AgentId,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        state_bounds: BoxBounds,
        input_bounds: BoxBounds,
        ref_state_bounds: BoxBounds,
        ref_input_bounds: BoxBounds,
        q_weight: DMatrix<f64>,
        r_weight: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let n = a.nrows();
        let q = b.ncols();
        let p = c.nrows();
        let shape = |what, m: &DMatrix<f64>, rows, cols| {
            if m.nrows() != rows || m.ncols() != cols {
                Err(ModelError::BadShape {
                    id,
                    what,
                    got_rows: m.nrows(),
                    got_cols: m.ncols(),
                    rows,
                    cols,
                })
            } else {
                Ok(())
            }
        };
        shape("A", &a, n, n)?;
        shape("B", &b, n, q)?;
        shape("C", &c, p, n)?;
        shape("D", &d, p, q)?;
        shape("Q", &q_weight, n, n)?;
        shape("R", &r_weight, q, q)?;

        for (what, m) in [("Q", &q_weight), ("R", &r_weight)] {
            if m.clone().cholesky().is_none() {
                return Err(ModelError::NotPositiveDefinite { id, what });
            }
        }

        let bound_dims = [
            ("state_bounds", &state_bounds, n),
            ("input_bounds", &input_bounds, q),
            ("ref_state_bounds", &ref_state_bounds, n),
            ("ref_input_bounds", &ref_input_bounds, q),
        ];
        for (what, bb, expected) in bound_dims {
            if bb.lower.len() != expected || bb.upper.len() != expected {
                return Err(ModelError::BadBoundDim {
                    id,
                    what,
                    got: bb.lower.len().max(bb.upper.len()),
                    expected,
                });
            }
            for coord in 0..expected {
                if bb.lower[coord] > bb.upper[coord] {
                    return Err(ModelError::EmptyBounds { id, what, coord });
                }
            }
        }
        // Tightened boxes need strictly positive margin to the nominal ones.
        for (what, tight, nominal) in [
            ("state", &ref_state_bounds, &state_bounds),
            ("input", &ref_input_bounds, &input_bounds),
        ] {
            for coord in 0..tight.dim() {
                if tight.lower[coord] <= nominal.lower[coord]
                    || tight.upper[coord] >= nominal.upper[coord]
                {
                    return Err(ModelError::NotTightened { id, what, coord });
                }
            }
        }

        Ok(Self {
            id,
            a,
            b,
            c,
            d,
            state_bounds,
            input_bounds,
            ref_state_bounds,
            ref_input_bounds,
            q_weight,
            r_weight,
        })
    }

    /// Planar double integrator: positions integrate velocities, inputs are
    /// accelerations, the output is the full state.
    pub fn double_integrator(
        id: AgentId,
        state_bounds: BoxBounds,
        input_bounds: BoxBounds,
        ref_state_bounds: BoxBounds,
        ref_input_bounds: BoxBounds,
        q_weight: DMatrix<f64>,
        r_weight: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 1.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        );
        let b = DMatrix::from_row_slice(
            4,
            2,
            &[
                0.0, 0.0, //
                0.0, 0.0, //
                1.0, 0.0, //
                0.0, 1.0,
            ],
        );
        let c = DMatrix::identity(4, 4);
        let d = DMatrix::zeros(4, 2);
        Self::new(
            id,
            a,
            b,
            c,
            d,
            state_bounds,
            input_bounds,
            ref_state_bounds,
            ref_input_bounds,
            q_weight,
            r_weight,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// One dynamics step `A x + B u`.
    pub fn step_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.state_dim(), "state dimension");
        assert_eq!(u.len(), self.input_dim(), "input dimension");
        &self.a * x + &self.b * u
    }

    /// Output map `C x + D u`.
    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.state_dim(), "state dimension");
        assert_eq!(u.len(), self.input_dim(), "input dimension");
        &self.c * x + &self.d * u
    }

    fn bounds_for(&self, set: BoundSet) -> (&BoxBounds, &BoxBounds) {
        match set {
            BoundSet::Nominal => (&self.state_bounds, &self.input_bounds),
            BoundSet::Tightened => (&self.ref_state_bounds, &self.ref_input_bounds),
        }
    }

    /// Signed margins of `(x, u)` against the chosen constraint set.
    pub fn check_constraints(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        set: BoundSet,
    ) -> ConstraintReport {
        let (xb, ub) = self.bounds_for(set);
        let mut margins = Vec::with_capacity(2 * (x.len() + u.len()));
        for (signal, bounds, v) in [
            (SignalKind::State, xb, x),
            (SignalKind::Input, ub, u),
        ] {
            for (coord, (lo, hi)) in bounds.margins(v).into_iter().enumerate() {
                margins.push((
                    ConstraintId {
                        set,
                        signal,
                        coord,
                        side: BoundSide::Lower,
                    },
                    lo,
                ));
                margins.push((
                    ConstraintId {
                        set,
                        signal,
                        coord,
                        side: BoundSide::Upper,
                    },
                    hi,
                ));
            }
        }
        ConstraintReport { margins }
    }

    /// Lift a periodic output trajectory to the state/input trajectories that
    /// realize it. The lift is the minimum-norm least-squares solution of the
    /// stacked output and periodic-dynamics equations, so it is deterministic
    /// even when the input is not uniquely determined.
    pub fn lift_output_trajectory(
        &self,
        y: &PeriodicTrajectory,
    ) -> Result<CooperationReference, ModelError> {
        let n = self.state_dim();
        let q = self.input_dim();
        let p = self.output_dim();
        if y.dim() != p {
            return Err(ModelError::DimensionMismatch {
                what: "output trajectory",
                got: y.dim(),
                expected: p,
            });
        }
        let t = y.period();
        let unknowns = t * (n + q);
        let rows = t * (p + n);
        let mut m = DMatrix::zeros(rows, unknowns);
        let mut rhs = DVector::zeros(rows);
        let x_at = |k: usize| (k % t) * n;
        let u_at = |k: usize| t * n + (k % t) * q;
        for k in 0..t {
            // Output rows: C x(k) + D u(k) = y(k).
            let row0 = k * p;
            m.view_mut((row0, x_at(k)), (p, n)).copy_from(&self.c);
            m.view_mut((row0, u_at(k)), (p, q)).copy_from(&self.d);
            rhs.rows_mut(row0, p).copy_from(y.at(k));
            // Dynamics rows: A x(k) + B u(k) - x(k+1 mod T) = 0.
            let row1 = t * p + k * n;
            m.view_mut((row1, x_at(k)), (n, n)).copy_from(&self.a);
            m.view_mut((row1, u_at(k)), (n, q)).copy_from(&self.b);
            for i in 0..n {
                m[(row1 + i, x_at(k + 1) + i)] -= 1.0;
            }
        }
        let svd = m.clone().svd(true, true);
        let sol = svd
            .solve(&rhs, 1e-12)
            .map_err(|_| ModelError::InconsistentOutputTrajectory { residual: f64::NAN })?;
        let residual = (&m * &sol - &rhs).amax();
        if residual > REFERENCE_RESIDUAL_TOL {
            return Err(ModelError::InconsistentOutputTrajectory { residual });
        }
        let x_steps = (0..t)
            .map(|k| DVector::from(sol.rows(x_at(k), n).clone_owned()))
            .collect();
        let u_steps = (0..t)
            .map(|k| DVector::from(sol.rows(u_at(k), q).clone_owned()))
            .collect();
        Ok(CooperationReference {
            y: y.clone(),
            x: PeriodicTrajectory::new(x_steps).expect("t >= 1"),
            u: PeriodicTrajectory::new(u_steps).expect("t >= 1"),
        })
    }

    /// Report-based admissibility check of a reference: periodic dynamics
    /// closure, output consistency, and tightened-bound margins.
    pub fn validate_admissible(&self, r: &CooperationReference) -> AdmissibilityReport {
        let t = r.y.period();
        let mut dynamics_residuals = Vec::with_capacity(t);
        let mut output_residuals = Vec::with_capacity(t);
        let mut bound_violations = Vec::new();
        for k in 0..t {
            let next = self.step_dynamics(r.x.at(k), r.u.at(k));
            dynamics_residuals.push((next - r.x.at(k + 1)).amax());
            let out = self.output(r.x.at(k), r.u.at(k));
            output_residuals.push((out - r.y.at(k)).amax());
            let report = self.check_constraints(r.x.at(k), r.u.at(k), BoundSet::Tightened);
            for (cid, margin) in report.violations(REFERENCE_RESIDUAL_TOL) {
                bound_violations.push((k, cid, margin));
            }
        }
        AdmissibilityReport {
            dynamics_residuals,
            output_residuals,
            bound_violations,
        }
    }
}

/// A periodic output trajectory together with the state/input trajectories
/// realizing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooperationReference {
    pub y: PeriodicTrajectory,
    pub x: PeriodicTrajectory,
    pub u: PeriodicTrajectory,
}

impl CooperationReference {
    pub fn period(&self) -> usize {
        self.y.period()
    }

    /// Rotate the whole reference by one step.
    pub fn shift(&self) -> Self {
        Self {
            y: self.y.shift(),
            x: self.x.shift(),
            u: self.u.shift(),
        }
    }

    /// Constant reference sitting at an equilibrium `(x, u)`.
    pub fn equilibrium(model: &AgentModel, x: DVector<f64>, u: DVector<f64>, period: usize) -> Self {
        let y = model.output(&x, &u);
        Self {
            y: PeriodicTrajectory::constant(period, y),
            x: PeriodicTrajectory::constant(period, x),
            u: PeriodicTrajectory::constant(period, u),
        }
    }
}

/// Outcome of [`AgentModel::validate_admissible`].
#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    /// Per step k: `||A x(k) + B u(k) - x(k+1 mod T)||_inf`.
    pub dynamics_residuals: Vec<f64>,
    /// Per step k: `||C x(k) + D u(k) - y(k)||_inf`.
    pub output_residuals: Vec<f64>,
    /// Tightened-bound violations `(step, constraint, signed margin)`.
    pub bound_violations: Vec<(usize, ConstraintId, f64)>,
}

impl AdmissibilityReport {
    pub fn max_dynamics_residual(&self) -> f64 {
        self.dynamics_residuals.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_output_residual(&self) -> f64 {
        self.output_residuals.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_admissible(&self) -> bool {
        self.max_dynamics_residual() <= REFERENCE_RESIDUAL_TOL
            && self.max_output_residual() <= REFERENCE_RESIDUAL_TOL
            && self.bound_violations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn study_bounds() -> (BoxBounds, BoxBounds, BoxBounds, BoxBounds) {
        (
            BoxBounds::symmetric(&[4.1, 4.1, 2.1, 2.1]),
            BoxBounds::symmetric(&[1.1, 1.1]),
            BoxBounds::symmetric(&[4.0, 4.0, 2.0, 2.0]),
            BoxBounds::symmetric(&[1.0, 1.0]),
        )
    }

    pub(crate) fn study_agent(id: u32) -> AgentModel {
        let (xb, ub, txb, tub) = study_bounds();
        AgentModel::double_integrator(
            AgentId(id),
            xb,
            ub,
            txb,
            tub,
            DMatrix::identity(4, 4),
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    fn vec4(v: [f64; 4]) -> DVector<f64> {
        DVector::from_column_slice(&v)
    }

    #[test]
    fn double_integrator_zero_velocity_is_fixed_point() {
        let m = study_agent(1);
        let x = vec4([1.5, 0.9, 0.0, 0.0]);
        let u = DVector::zeros(2);
        assert_eq!(m.step_dynamics(&x, &u), x);
    }

    #[test]
    fn double_integrator_velocity_integrates_position() {
        let m = study_agent(1);
        let x = vec4([0.0, 0.0, 1.0, 1.0]);
        let u = DVector::zeros(2);
        assert_eq!(m.step_dynamics(&x, &u), vec4([1.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn zero_maps_to_zero() {
        let m = study_agent(1);
        let z4 = DVector::zeros(4);
        let z2 = DVector::zeros(2);
        assert_eq!(m.step_dynamics(&z4, &z2), z4);
        assert_eq!(m.output(&z4, &z2), z4);
    }

    #[test]
    fn output_is_state_for_identity_c() {
        let m = study_agent(1);
        let x = vec4([1.0, 2.0, 0.0, 0.0]);
        assert_eq!(m.output(&x, &DVector::zeros(2)), x);
    }

    #[test]
    fn output_with_projecting_c() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let x = DVector::from_column_slice(&[3.0, 4.0]);
        let y = &c * &x;
        assert_eq!(y, DVector::from_column_slice(&[3.0, 0.0]));
    }

    #[test]
    fn nominal_boundary_is_inclusive() {
        let m = study_agent(1);
        let report = m.check_constraints(
            &vec4([4.1, 0.0, 0.0, 0.0]),
            &DVector::zeros(2),
            BoundSet::Nominal,
        );
        assert!(report.ok(0.0));
        assert_eq!(report.worst(), 0.0);
    }

    #[test]
    fn tightened_bound_violation_has_exact_margin() {
        let m = study_agent(1);
        let report = m.check_constraints(
            &vec4([4.05, 0.0, 0.0, 0.0]),
            &DVector::zeros(2),
            BoundSet::Tightened,
        );
        let violations = report.violations(0.0);
        assert_eq!(violations.len(), 1);
        let (cid, margin) = violations[0];
        assert_eq!(cid.signal, SignalKind::State);
        assert_eq!(cid.coord, 0);
        assert_eq!(cid.side, BoundSide::Upper);
        assert_abs_diff_eq!(margin, -0.05, epsilon = 1e-12);
    }

    #[test]
    fn origin_is_interior() {
        let m = study_agent(1);
        let report =
            m.check_constraints(&DVector::zeros(4), &DVector::zeros(2), BoundSet::Nominal);
        assert!(report.ok(0.0));
    }

    #[test]
    fn lift_constant_output_is_equilibrium() {
        let m = study_agent(1);
        let y = PeriodicTrajectory::constant(10, vec4([1.5, 0.9, 0.0, 0.0]));
        let r = m.lift_output_trajectory(&y).unwrap();
        assert_abs_diff_eq!(
            (r.x.at(0) - vec4([1.5, 0.9, 0.0, 0.0])).amax(),
            0.0,
            epsilon = 1e-10
        );
        assert!(r.u.iter().all(|u| u.amax() < 1e-10));
        assert!(m.validate_admissible(&r).is_admissible());
    }

    #[test]
    fn lift_triangle_wave_recovers_inputs() {
        // Position sweeps up at constant velocity, then back down: zero input
        // along the constant-velocity runs, velocity reversals at the turns.
        let m = study_agent(1);
        let t = 10;
        let v = 0.2;
        let mut pos = vec![0.0; t];
        let mut vel = vec![0.0; t];
        for k in 0..t {
            vel[k] = if k < 5 { v } else { -v };
        }
        for k in 1..t {
            pos[k] = pos[k - 1] + vel[k - 1];
        }
        let steps: Vec<DVector<f64>> = (0..t)
            .map(|k| vec4([pos[k], 0.0, vel[k], 0.0]))
            .collect();
        let y = PeriodicTrajectory::new(steps).unwrap();
        let r = m.lift_output_trajectory(&y).unwrap();
        for k in 0..t {
            let expected = match k {
                4 => -2.0 * v,
                9 => 2.0 * v,
                _ => 0.0,
            };
            assert_abs_diff_eq!(r.u.at(k)[0], expected, epsilon = 1e-9);
            assert_abs_diff_eq!(r.u.at(k)[1], 0.0, epsilon = 1e-9);
        }
        assert!(m.validate_admissible(&r).is_admissible());
    }

    #[test]
    fn lift_velocity_jump_pair_isolated_inputs() {
        // Velocity bumps by 0.5 at step 2 and drops back at step 7; position
        // closes over the period. The lift recovers exactly those two inputs.
        let m = study_agent(1);
        let t = 10;
        let mut vel = vec![0.0; t];
        for item in vel.iter_mut().take(8).skip(3) {
            *item = 0.5;
        }
        // Position must return to start: sum of velocities = 2.5; recenter by
        // subtracting the mean so the closed-loop sum is zero.
        let mean = vel.iter().sum::<f64>() / t as f64;
        for item in vel.iter_mut() {
            *item -= mean;
        }
        let mut pos = vec![0.0; t];
        for k in 1..t {
            pos[k] = pos[k - 1] + vel[k - 1];
        }
        let y = PeriodicTrajectory::new(
            (0..t).map(|k| vec4([pos[k], 0.0, vel[k], 0.0])).collect(),
        )
        .unwrap();
        let r = m.lift_output_trajectory(&y).unwrap();
        for k in 0..t {
            let expected = match k {
                2 => 0.5,
                7 => -0.5,
                _ => 0.0,
            };
            assert_abs_diff_eq!(r.u.at(k)[0], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn lift_rejects_inconsistent_output() {
        // A sawtooth that never returns cannot close periodically.
        let m = study_agent(1);
        let y = PeriodicTrajectory::new(
            (0..10).map(|k| vec4([k as f64, 0.0, 1.0, 0.0])).collect(),
        )
        .unwrap();
        assert!(matches!(
            m.lift_output_trajectory(&y),
            Err(ModelError::InconsistentOutputTrajectory { .. })
        ));
    }

    #[test]
    fn equilibrium_reference_is_admissible() {
        let m = study_agent(1);
        let r = CooperationReference::equilibrium(
            &m,
            vec4([1.0, -2.0, 0.0, 0.0]),
            DVector::zeros(2),
            10,
        );
        assert!(m.validate_admissible(&r).is_admissible());
    }

    #[test]
    fn perturbed_reference_flags_two_dynamics_steps() {
        let m = study_agent(1);
        let mut r = CooperationReference::equilibrium(
            &m,
            vec4([1.0, 0.0, 0.0, 0.0]),
            DVector::zeros(2),
            10,
        );
        // Move x(0) without recomputing inputs: the equations into and out of
        // step 0 both break.
        let mut steps: Vec<DVector<f64>> = r.x.iter().cloned().collect();
        steps[0][0] += 1.0;
        r.x = PeriodicTrajectory::new(steps).unwrap();
        let report = m.validate_admissible(&r);
        let violated: Vec<usize> = report
            .dynamics_residuals
            .iter()
            .enumerate()
            .filter(|&(_, &res)| res > REFERENCE_RESIDUAL_TOL)
            .map(|(k, _)| k)
            .collect();
        assert_eq!(violated, vec![0, 9]);
        assert!(!report.is_admissible());
    }

    #[test]
    fn out_of_bounds_reference_flags_tightened_violation() {
        let m = study_agent(1);
        let r = CooperationReference::equilibrium(
            &m,
            vec4([4.5, 0.0, 0.0, 0.0]),
            DVector::zeros(2),
            10,
        );
        let report = m.validate_admissible(&r);
        assert!(!report.bound_violations.is_empty());
        let (_, cid, margin) = report.bound_violations[0];
        assert_eq!(cid.coord, 0);
        assert_abs_diff_eq!(margin, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn average_of_admissible_references_is_admissible() {
        let m = study_agent(1);
        let r1 = CooperationReference::equilibrium(
            &m,
            vec4([1.0, 2.0, 0.0, 0.0]),
            DVector::zeros(2),
            10,
        );
        let r2 = CooperationReference::equilibrium(
            &m,
            vec4([-3.0, 0.5, 0.0, 0.0]),
            DVector::zeros(2),
            10,
        );
        let avg = |a: &PeriodicTrajectory, b: &PeriodicTrajectory| {
            PeriodicTrajectory::new(
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x + y) * 0.5)
                    .collect(),
            )
            .unwrap()
        };
        let mid = CooperationReference {
            y: avg(&r1.y, &r2.y),
            x: avg(&r1.x, &r2.x),
            u: avg(&r1.u, &r2.u),
        };
        assert!(m.validate_admissible(&mid).is_admissible());
    }

    #[test]
    fn rejects_non_spd_weights() {
        let (xb, ub, txb, tub) = study_bounds();
        let mut q = DMatrix::identity(4, 4);
        q[(0, 0)] = -1.0;
        let err = AgentModel::double_integrator(
            AgentId(1),
            xb,
            ub,
            txb,
            tub,
            q,
            DMatrix::identity(2, 2),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NotPositiveDefinite { .. }));
    }

    #[test]
    fn rejects_non_tightened_reference_bounds() {
        let (xb, ub, _, tub) = study_bounds();
        let err = AgentModel::double_integrator(
            AgentId(1),
            xb.clone(),
            ub,
            xb,
            tub,
            DMatrix::identity(4, 4),
            DMatrix::identity(2, 2),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NotTightened { .. }));
    }
}
