//! Strain field evaluation, backbone reconstruction and body Jacobians.
//!
//! The backbone is rebuilt as a product of exponentials. Each subinterval
//! `[a, a + h]` uses the fourth-order Magnus step with two Gauss points,
//! `W = h/2 (xi_1 + xi_2) + sqrt(3) h^2 / 12 [xi_1, xi_2]`, and the body
//! Jacobian is propagated as the exact derivative of that discrete map:
//! `J <- Ad(exp W)^-1 (J + T(W) dW/dq)`.

use nalgebra::{DMatrix, DVector, Matrix6, Matrix6xX, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{
    ad_vec, adjoint_inv, bracket, exp_se3, tangent, tangent_rate, tangent_rate_apply, Pose, Twist,
};
use crate::model::{RobotModel, StrainBasis};

const SQRT3: f64 = 1.732_050_807_568_877_2;

fn check_abscissa(model: &RobotModel, x: f64) -> Result<()> {
    if !(0.0..=model.length()).contains(&x) {
        return Err(Error::Domain { x, limit: model.length() });
    }
    Ok(())
}

/// `xi(X) = xi_0 + B_q(X) q`.
pub fn eval_strain(model: &RobotModel, q: &DVector<f64>, x: f64) -> Result<Twist> {
    check_abscissa(model, x)?;
    let basis = model.basis();
    let xi = basis.reference().to_vector() + basis.eval(x) * q;
    Ok(Twist::from_vector(&xi))
}

/// One Magnus subinterval with the basis sampled at its two Gauss points.
#[derive(Clone, Debug)]
pub(crate) struct Piece {
    pub h: f64,
    pub b1: Matrix6xX<f64>,
    pub b2: Matrix6xX<f64>,
}

/// Ordered subintervals from X = 0; the state after piece `k` is the frame
/// at the k-th breakpoint.
#[derive(Clone, Debug)]
pub(crate) struct Grid {
    pub pieces: Vec<Piece>,
}

impl Grid {
    /// Pieces joining 0 and the given increasing breakpoints.
    pub fn new(basis: &StrainBasis, breakpoints: Vec<f64>) -> Self {
        let mut pieces = Vec::with_capacity(breakpoints.len());
        let mut a = 0.0;
        for &b in &breakpoints {
            let h = b - a;
            let x1 = a + h * (0.5 - SQRT3 / 6.0);
            let x2 = a + h * (0.5 + SQRT3 / 6.0);
            pieces.push(Piece { h, b1: basis.eval(x1), b2: basis.eval(x2) });
            a = b;
        }
        Self { pieces }
    }

    /// Uniform `intervals`-piece grid over [0, L] merged with the requested
    /// abscissae. Returns the grid and, per requested point, the index of
    /// the piece ending there (`None` for X = 0).
    pub fn with_points(model: &RobotModel, points: &[f64]) -> (Self, Vec<Option<usize>>) {
        let length = model.length();
        let intervals = model.numerics().fk_intervals;
        let top = points.iter().copied().fold(0.0, f64::max);
        let mut breaks: Vec<f64> = (1..=intervals)
            .map(|k| length * k as f64 / intervals as f64)
            .filter(|&x| x < top)
            .collect();
        breaks.extend(points.iter().copied().filter(|&x| x > 0.0));
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * length);
        let index = points
            .iter()
            .map(|&p| {
                if p <= 0.0 {
                    None
                } else {
                    breaks.iter().position(|&b| (b - p).abs() <= 1e-14 * length)
                }
            })
            .collect();
        (Self::new(model.basis(), breaks), index)
    }
}

/// Frame state carried along a sweep.
#[derive(Clone, Debug)]
pub(crate) struct FrameState {
    pub pose: Pose,
    pub jacobian: Matrix6xX<f64>,
    /// Body twist `J qdot`.
    pub twist: Vector6<f64>,
    /// `Jdot qdot`.
    pub jdot_qdot: Vector6<f64>,
    /// Full `Jdot`, only when requested.
    pub jdot: Option<Matrix6xX<f64>>,
}

#[derive(Clone, Copy, Default)]
pub(crate) struct SweepOptions<'a> {
    pub jacobian: bool,
    pub qdot: Option<&'a DVector<f64>>,
    pub full_jdot: bool,
}

/// Marches the grid from the clamped base, calling `visit(k, state)` with
/// the frame at the end of every piece.
pub(crate) fn sweep(
    grid: &Grid,
    reference: &Vector6<f64>,
    q: &DVector<f64>,
    opts: SweepOptions<'_>,
    mut visit: impl FnMut(usize, &FrameState),
) {
    let n = q.len();
    let jacobian = opts.jacobian || opts.qdot.is_some();
    let mut state = FrameState {
        pose: Pose::identity(),
        jacobian: Matrix6xX::zeros(if jacobian { n } else { 0 }),
        twist: Vector6::zeros(),
        jdot_qdot: Vector6::zeros(),
        jdot: if opts.full_jdot && opts.qdot.is_some() { Some(Matrix6xX::zeros(n)) } else { None },
    };
    for (k, piece) in grid.pieces.iter().enumerate() {
        let h = piece.h;
        let c = SQRT3 * h * h / 12.0;
        let xi1 = reference + &piece.b1 * q;
        let xi2 = reference + &piece.b2 * q;
        let omega = (xi1 + xi2) * (0.5 * h) + bracket(&xi1, &xi2) * c;
        let step = exp_se3(&Twist::from_vector(&omega), 1.0);
        let ad_inv = adjoint_inv(&step);
        state.pose = state.pose * step;
        if jacobian {
            // dW/dq
            let sens: Matrix6xX<f64> = (&piece.b1 + &piece.b2) * (0.5 * h)
                + (ad_vec(&xi1) * &piece.b2 - ad_vec(&xi2) * &piece.b1) * c;
            let t = tangent(&omega);
            let carried = ad_inv * &state.jacobian;
            let local = t * &sens;
            if let Some(qdot) = opts.qdot {
                let xi1_dot = &piece.b1 * qdot;
                let xi2_dot = &piece.b2 * qdot;
                let omega_dot = &sens * qdot;
                let rel = t * omega_dot;
                state.twist = ad_inv * state.twist + rel;
                let ad_rel = ad_vec(&rel);
                let sens_dot_qdot = bracket(&xi1_dot, &xi2_dot) * (2.0 * c);
                state.jdot_qdot = ad_inv * state.jdot_qdot - ad_rel * state.twist
                    + tangent_rate_apply(&omega, &omega_dot, &omega_dot)
                    + t * sens_dot_qdot;
                if let Some(jdot) = state.jdot.as_mut() {
                    let sens_dot: Matrix6xX<f64> =
                        (ad_vec(&xi1_dot) * &piece.b2 - ad_vec(&xi2_dot) * &piece.b1) * c;
                    let t_dot: Matrix6<f64> = tangent_rate(&omega, &omega_dot);
                    *jdot = ad_inv * &*jdot - ad_rel * &carried + t_dot * &sens + t * sens_dot;
                }
            }
            state.jacobian = carried + local;
        }
        visit(k, &state);
    }
}

fn frames_at(
    model: &RobotModel,
    q: &DVector<f64>,
    points: &[f64],
    jacobian: bool,
) -> Result<Vec<(Pose, Matrix6xX<f64>)>> {
    if q.len() != model.dof() {
        return Err(Error::Config(format!(
            "configuration has {} entries, basis has {}",
            q.len(),
            model.dof()
        )));
    }
    for &x in points {
        check_abscissa(model, x)?;
    }
    let (grid, index) = Grid::with_points(model, points);
    let mut states = vec![None; grid.pieces.len()];
    let reference = model.basis().reference().to_vector();
    sweep(&grid, &reference, q, SweepOptions { jacobian, ..Default::default() }, |k, s| {
        states[k] = Some((s.pose, s.jacobian.clone()));
    });
    Ok(index
        .iter()
        .map(|i| match i {
            Some(k) => states[*k].clone().expect("visited"),
            None => (Pose::identity(), Matrix6xX::zeros(if jacobian { q.len() } else { 0 })),
        })
        .collect())
}

/// Backbone frame `g(X)` relative to the clamped base.
pub fn forward_kinematics(model: &RobotModel, q: &DVector<f64>, x: f64) -> Result<Pose> {
    Ok(frames_at(model, q, &[x], false)?[0].0)
}

/// Body Jacobian `J(X, q)`: `eta(X) = J qdot` is the body twist of frame X.
pub fn body_jacobian(model: &RobotModel, q: &DVector<f64>, x: f64) -> Result<Matrix6xX<f64>> {
    Ok(frames_at(model, q, &[x], true)?.swap_remove(0).1)
}

/// Cartesian axis of a backbone marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// One scalar task output: a coordinate of the frame at abscissa `marker`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskOutput {
    pub marker: f64,
    pub axis: Axis,
}

/// Ordered list of task outputs, `x = h_g(q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskSelector {
    pub outputs: Vec<TaskOutput>,
}

impl TaskSelector {
    pub fn new(outputs: Vec<TaskOutput>) -> Self {
        Self { outputs }
    }

    /// Tip position, three outputs.
    pub fn tip_xyz(length: f64) -> Self {
        Self::new(
            [Axis::X, Axis::Y, Axis::Z]
                .iter()
                .map(|&axis| TaskOutput { marker: length, axis })
                .collect(),
        )
    }

    /// Tip position plus the y coordinate of a pre-tip marker.
    pub fn tip_xyz_marker_y(length: f64, marker: f64) -> Self {
        let mut sel = Self::tip_xyz(length);
        sel.outputs.push(TaskOutput { marker, axis: Axis::Y });
        sel
    }

    pub fn dim(&self) -> usize {
        self.outputs.len()
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(Error::Config("task selector is empty".into()));
        }
        for o in &self.outputs {
            if !(o.marker > 0.0 && o.marker <= model.length()) {
                return Err(Error::Config(format!(
                    "task marker at {} m is not on the backbone (0, {}]",
                    o.marker,
                    model.length()
                )));
            }
        }
        Ok(())
    }

    fn markers(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o.marker).collect()
    }
}

/// Task coordinates `x = h_g(q)`.
pub fn task_map(model: &RobotModel, q: &DVector<f64>, selector: &TaskSelector) -> Result<DVector<f64>> {
    selector.validate(model)?;
    let frames = frames_at(model, q, &selector.markers(), false)?;
    Ok(DVector::from_iterator(
        selector.dim(),
        selector.outputs.iter().zip(&frames).map(|(o, (g, _))| g.position[o.axis.index()]),
    ))
}

/// Task coordinates and `dx/dq`.
pub fn task_jacobian(
    model: &RobotModel,
    q: &DVector<f64>,
    selector: &TaskSelector,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    selector.validate(model)?;
    let frames = frames_at(model, q, &selector.markers(), true)?;
    let m = selector.dim();
    let mut x = DVector::zeros(m);
    let mut jac = DMatrix::zeros(m, q.len());
    for (row, (o, (g, j))) in selector.outputs.iter().zip(&frames).enumerate() {
        x[row] = g.position[o.axis.index()];
        // dp/dq = R J_linear
        let lin = g.rotation * j.fixed_rows::<3>(3);
        jac.row_mut(row).copy_from(&lin.row(o.axis.index()));
    }
    Ok((x, jac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BasisConfig, ModelConfig, StrainComponent};
    use nalgebra::{Matrix3, Vector3};

    fn single_bend_model() -> RobotModel {
        let mut cfg = ModelConfig::default();
        cfg.basis = BasisConfig::only(&[(StrainComponent::BendX, 0)]);
        RobotModel::new(cfg).unwrap()
    }

    #[test]
    fn reference_strain_at_rest() {
        let model = RobotModel::default();
        let q = DVector::zeros(model.dof());
        for x in [0.0, 0.1, 0.38] {
            let xi = eval_strain(&model, &q, x).unwrap();
            assert_eq!(xi.to_vector(), Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0));
        }
        assert!(matches!(eval_strain(&model, &q, 0.5), Err(Error::Domain { .. })));
        assert!(eval_strain(&model, &q, -1e-9).is_err());
    }

    #[test]
    fn constant_curvature_strain() {
        let model = single_bend_model();
        let q = DVector::from_element(1, 3.5);
        let xi = eval_strain(&model, &q, 0.2).unwrap();
        assert_eq!(xi.to_vector(), Vector6::new(3.5, 0.0, 0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn straight_rod_fk() {
        let model = RobotModel::default();
        let q = DVector::zeros(model.dof());
        for x in [0.0, 0.05, 0.2, 0.38] {
            let g = forward_kinematics(&model, &q, x).unwrap();
            assert!((g.rotation - Matrix3::identity()).abs().max() < 1e-14);
            assert!((g.position - Vector3::new(0.0, 0.0, x)).norm() < 1e-14);
        }
    }

    #[test]
    fn base_jacobian_is_zero() {
        let model = RobotModel::default();
        let q = DVector::from_fn(model.dof(), |i, _| 0.3 * i as f64);
        let j = body_jacobian(&model, &q, 0.0).unwrap();
        assert_eq!(j.norm(), 0.0);
    }

    #[test]
    fn task_map_straight() {
        let model = RobotModel::default();
        let q = DVector::zeros(model.dof());
        let sel = TaskSelector::tip_xyz(model.length());
        let x = task_map(&model, &q, &sel).unwrap();
        assert!((x - DVector::from_vec(vec![0.0, 0.0, 0.38])).norm() < 1e-14);
        let sel4 = TaskSelector::tip_xyz_marker_y(0.38, 0.34);
        assert_eq!(sel4.dim(), 4);
        let bad = TaskSelector::new(vec![TaskOutput { marker: 0.5, axis: Axis::X }]);
        assert!(matches!(task_map(&model, &q, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_twist_matches_jacobian_times_qdot() {
        let model = RobotModel::default();
        let n = model.dof();
        let q = DVector::from_fn(n, |i, _| ((i * 7 % 5) as f64 - 2.0) * 1.3);
        let qdot = DVector::from_fn(n, |i, _| ((i * 3 % 4) as f64 - 1.5) * 0.7);
        let reference = model.basis().reference().to_vector();
        sweep(
            &model.dyn_grid,
            &reference,
            &q,
            SweepOptions { jacobian: true, qdot: Some(&qdot), full_jdot: true },
            |_, s| {
                assert!((&s.jacobian * &qdot - s.twist).norm() < 1e-12);
                let jd = s.jdot.as_ref().unwrap();
                assert!((jd * &qdot - s.jdot_qdot).norm() < 1e-10);
            },
        );
    }

    #[test]
    fn jdot_matches_finite_difference() {
        let model = RobotModel::default();
        let n = model.dof();
        let q = DVector::from_fn(n, |i, _| ((i * 7 % 5) as f64 - 2.0) * 1.3);
        let qdot = DVector::from_fn(n, |i, _| ((i * 3 % 4) as f64 - 1.5) * 0.7);
        let x = 0.31;
        let eps = 1e-6;
        let jp = body_jacobian(&model, &(&q + &qdot * eps), x).unwrap();
        let jm = body_jacobian(&model, &(&q - &qdot * eps), x).unwrap();
        let fd = (jp - jm) / (2.0 * eps);
        let (grid, idx) = Grid::with_points(&model, &[x]);
        let mut jdot = None;
        let reference = model.basis().reference().to_vector();
        sweep(
            &grid,
            &reference,
            &q,
            SweepOptions { jacobian: true, qdot: Some(&qdot), full_jdot: true },
            |k, s| {
                if Some(k) == idx[0] {
                    jdot = s.jdot.clone();
                }
            },
        );
        let jdot = jdot.unwrap();
        assert!((&fd - &jdot).norm() < 1e-7 * jdot.norm().max(1.0));
    }

    #[test]
    fn body_jacobian_matches_finite_difference_of_pose() {
        let model = RobotModel::default();
        let n = model.dof();
        let q = DVector::from_fn(n, |i, _| ((i * 7 % 5) as f64 - 2.0) * 1.3);
        let x = 0.27;
        let g = forward_kinematics(&model, &q, x).unwrap();
        let j = body_jacobian(&model, &q, x).unwrap();
        let eps = 1e-6;
        for i in 0..n {
            let mut dq = DVector::zeros(n);
            dq[i] = eps;
            let gp = forward_kinematics(&model, &(&q + &dq), x).unwrap().to_homogeneous();
            let gm = forward_kinematics(&model, &(&q - &dq), x).unwrap().to_homogeneous();
            let m = g.inverse().to_homogeneous() * (gp - gm) / (2.0 * eps);
            let fd = Vector6::new(m[(2, 1)], m[(0, 2)], m[(1, 0)], m[(0, 3)], m[(1, 3)], m[(2, 3)]);
            assert!((fd - j.column(i)).norm() < 1e-7, "column {i}");
        }
    }
}
