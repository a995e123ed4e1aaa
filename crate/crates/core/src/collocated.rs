//! Collocated coordinates `theta = (theta_a, theta_u)`, where `theta_a` are
//! the actuation coordinates and `theta_u` the trailing `n - n_a` entries of
//! `q`, with `J_h = [A^T; 0 I]`.

use nalgebra::{DMatrix, DVector};

use crate::actuation;
use crate::dynamics;
use crate::error::{Error, Result};
use crate::model::RobotModel;

/// Largest accepted condition number of `J_h`.
pub const MAX_CONDITION: f64 = 1e10;

/// Finite-difference step for `Jdot_h` along the velocity.
const JDOT_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CollocatedJacobian {
    pub jh: DMatrix<f64>,
    pub jh_inv: DMatrix<f64>,
    pub condition: f64,
}

fn build(a: &DMatrix<f64>) -> Result<CollocatedJacobian> {
    let (n, na) = a.shape();
    if na > n {
        return Err(Error::Config(format!("{na} tendons exceed {n} coordinates")));
    }
    let mut jh = DMatrix::identity(n, n);
    jh.rows_mut(0, na).copy_from(&a.transpose());
    let sv = jh.clone().singular_values();
    let condition = sv.max() / sv.min();
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let jh_inv = block_inverse(a).ok_or(Error::Singular { condition })?;
    Ok(CollocatedJacobian { jh, jh_inv, condition })
}

/// `[A1 A2; 0 I]^-1 = [A1^-1, -A1^-1 A2; 0, I]` with `A^T = [A1 A2]`.
fn block_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (n, na) = a.shape();
    let at = a.transpose();
    let a1_inv = at.columns(0, na).clone_owned().lu().try_inverse()?;
    let mut inv = DMatrix::identity(n, n);
    inv.view_mut((0, 0), (na, na)).copy_from(&a1_inv);
    inv.view_mut((0, na), (na, n - na)).copy_from(&(-(&a1_inv * at.columns(na, n - na))));
    Some(inv)
}

/// `G_theta` and `J_h^-1` without the conditioning check, for inner loops.
pub(crate) fn g_theta_unchecked(
    model: &RobotModel,
    q: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let a = actuation::actuation_matrix(model, q)?;
    let inv = block_inverse(&a).ok_or(Error::Singular { condition: f64::INFINITY })?;
    let g = model.stiffness() * q + dynamics::gravity_vector(model, q)?;
    Ok((inv.tr_mul(&g), inv))
}

/// `J_h(q)` with its inverse; fails near actuation degeneracy.
pub fn jacobian_h(model: &RobotModel, q: &DVector<f64>) -> Result<CollocatedJacobian> {
    build(&actuation::actuation_matrix(model, q)?)
}

/// Collocated state: `theta_a(q)`, `theta_u` and `theta_dot = J_h qdot`.
#[derive(Clone, Debug, PartialEq)]
pub struct CollocatedState {
    pub theta_a: DVector<f64>,
    pub theta_u: DVector<f64>,
    pub theta_dot: DVector<f64>,
}

pub fn collocated_state(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<CollocatedState> {
    let ev = actuation::evaluate(model, q)?;
    let na = model.actuators();
    let jac = build(&ev.matrix)?;
    Ok(CollocatedState {
        theta_a: ev.coordinates,
        theta_u: q.rows(na, q.len() - na).clone_owned(),
        theta_dot: jac.jh * qdot,
    })
}

/// Equations of motion in collocated form:
/// `M_t thdd + (C_t + D_t) thd + K_t + F_t = A_t u`, with `K_t`, `F_t` the
/// transformed elastic and gravity force vectors and `A_t = [I; 0]`.
#[derive(Clone, Debug)]
pub struct CollocatedDynamics {
    pub mass: DMatrix<f64>,
    pub coriolis: DMatrix<f64>,
    pub damping: DMatrix<f64>,
    pub elastic: DVector<f64>,
    pub gravity: DVector<f64>,
    pub input: DMatrix<f64>,
    pub jacobian: CollocatedJacobian,
}

impl CollocatedDynamics {
    pub fn actuated(&self) -> usize {
        self.input.ncols()
    }

    /// `theta_ddot` for an input `u`.
    pub fn acceleration(&self, theta_dot: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs = &self.input * u
            - (&self.coriolis + &self.damping) * theta_dot
            - &self.elastic
            - &self.gravity;
        dynamics::solve_mass(self.mass.clone(), &rhs)
    }
}

/// `Jdot_h` by central differences along `qdot`.
pub fn jacobian_h_rate(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let speed = qdot.norm();
    if speed == 0.0 {
        return Ok(DMatrix::zeros(q.len(), q.len()));
    }
    let h = JDOT_STEP / speed;
    let ap = actuation::actuation_matrix(model, &(q + qdot * h))?;
    let am = actuation::actuation_matrix(model, &(q - qdot * h))?;
    let na = model.actuators();
    let mut out = DMatrix::zeros(q.len(), q.len());
    out.rows_mut(0, na).copy_from(&((ap - am).transpose() / (2.0 * h)));
    Ok(out)
}

/// Congruence transform of the dynamics by `J_h^-1`, including the
/// `Jdot_h` correction of the Coriolis term.
pub fn partition_dynamics(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<CollocatedDynamics> {
    let dm = dynamics::evaluate(model, q, qdot)?;
    let jac = build(&dm.actuation)?;
    let inv = &jac.jh_inv;
    let inv_t = inv.transpose();
    let jh_dot = jacobian_h_rate(model, q, qdot)?;
    let mass = &inv_t * &dm.mass * inv;
    let coriolis = &inv_t * (&dm.coriolis - &dm.mass * inv * jh_dot) * inv;
    let damping = &inv_t * &dm.damping * inv;
    let elastic = &inv_t * (&dm.stiffness * q);
    let gravity = &inv_t * &dm.gravity;
    let input = &inv_t * &dm.actuation;
    Ok(CollocatedDynamics {
        mass: (&mass + mass.transpose()) * 0.5,
        coriolis,
        damping,
        elastic,
        gravity,
        input,
        jacobian: jac,
    })
}

/// Full transformed static force `G_theta = J_h^-T (K q + F)`.
pub fn g_theta(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    let a = actuation::actuation_matrix(model, q)?;
    let jac = build(&a)?;
    let g = model.stiffness() * q + dynamics::gravity_vector(model, q)?;
    Ok(jac.jh_inv.transpose() * g)
}

/// Unactuated rows of `G_theta`; zero exactly on the attainable equilibria.
pub fn g_theta_u(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    let na = model.actuators();
    let g = g_theta(model, q)?;
    Ok(g.rows(na, g.len() - na).clone_owned())
}

/// Input that statically balances `q` on the actuated rows, `G_theta_a(q)`.
pub fn static_input(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    let na = model.actuators();
    Ok(g_theta(model, q)?.rows(0, na).clone_owned())
}

/// Whether `q` is an attainable equilibrium to tolerance `tol`.
pub fn on_equilibrium_set(model: &RobotModel, q: &DVector<f64>, tol: f64) -> Result<bool> {
    Ok(g_theta_u(model, q)?.norm() < tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn q_of(n: usize, seed: u64) -> DVector<f64> {
        DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin() * 1.5)
    }

    #[test]
    fn block_structure() {
        let model = RobotModel::default();
        let n = model.dof();
        let q = q_of(n, 1);
        let jac = jacobian_h(&model, &q).unwrap();
        let na = model.actuators();
        assert_eq!(jac.jh.view((na, na), (n - na, n - na)).clone_owned(), DMatrix::identity(n - na, n - na));
        assert_eq!(jac.jh.view((na, 0), (n - na, na)).norm(), 0.0);
        assert!((&jac.jh * &jac.jh_inv - DMatrix::identity(n, n)).norm() < 1e-10);
        let qd = q_of(n, 2);
        let a = actuation::actuation_matrix(&model, &q).unwrap();
        let th = &jac.jh * &qd;
        assert!((th.rows(0, na) - a.transpose() * &qd).norm() < 1e-15);
    }

    #[test]
    fn input_matrix_is_selection() {
        let model = RobotModel::default();
        let n = model.dof();
        let cd = partition_dynamics(&model, &q_of(n, 3), &q_of(n, 4)).unwrap();
        let mut expect = DMatrix::zeros(n, model.actuators());
        expect.fill_diagonal(1.0);
        assert!((&cd.input - expect).norm() < 1e-10);
        assert!(cd.mass.clone().cholesky().is_some());
    }

    #[test]
    fn unloaded_rest_on_equilibrium_set() {
        let mut cfg = ModelConfig::default();
        cfg.geometry.gravity = [0.0; 3];
        let model = RobotModel::new(cfg).unwrap();
        let z = DVector::zeros(model.dof());
        assert_eq!(g_theta_u(&model, &z).unwrap().norm(), 0.0);
        assert!(on_equilibrium_set(&model, &z, 1e-12).unwrap());
    }

    #[test]
    fn too_many_tendons_rejected() {
        let model = RobotModel::default();
        let a = DMatrix::zeros(3, 4);
        assert!(matches!(build(&a), Err(Error::Config(_))));
        let singular = DMatrix::zeros(model.dof(), 4);
        assert!(matches!(build(&singular), Err(Error::Singular { .. })));
    }
}
