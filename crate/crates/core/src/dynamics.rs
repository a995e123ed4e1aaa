//! Generalized dynamics `M qdd + (C + D) qd + K q + F = A u`, assembled by
//! Gauss-Legendre quadrature over the backbone.

use nalgebra::{DMatrix, DVector, Matrix6, Matrix6xX, Vector6};

use crate::actuation;
use crate::error::{Error, Result};
use crate::kinematics::{sweep, Grid, SweepOptions};
use crate::liegroup::ad_vec;
use crate::model::RobotModel;

/// All terms of the equations of motion at one state.
#[derive(Clone, Debug)]
pub struct DynamicsMatrices {
    pub mass: DMatrix<f64>,
    pub coriolis: DMatrix<f64>,
    pub damping: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    /// Generalized gravity `F(q)`, on the left-hand side.
    pub gravity: DVector<f64>,
    pub actuation: DMatrix<f64>,
}

fn check_dims(model: &RobotModel, q: &DVector<f64>, qdot: Option<&DVector<f64>>) -> Result<()> {
    let n = model.dof();
    if q.len() != n || qdot.is_some_and(|v| v.len() != n) {
        return Err(Error::Config(format!("state dimension mismatch, expected {n}")));
    }
    if q.iter().chain(qdot.into_iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite state".into()));
    }
    Ok(())
}

/// Screw inertia density at X: rotational entries about the local x, y and
/// (backbone) z axes, then the translational `rho A` entries.
pub fn cross_section_inertia(model: &RobotModel, x: f64) -> Result<Matrix6<f64>> {
    if !(0.0..=model.length()).contains(&x) {
        return Err(Error::Domain { x, limit: model.length() });
    }
    Ok(Matrix6::from_diagonal(&model.geometry().inertia_density(x)))
}

fn weighted_rows(diag: &Vector6<f64>, j: &Matrix6xX<f64>) -> Matrix6xX<f64> {
    let mut out = j.clone();
    for r in 0..6 {
        out.row_mut(r).scale_mut(diag[r]);
    }
    out
}

fn gravity_wrench(model: &RobotModel, rotation_t: &nalgebra::Matrix3<f64>, x: f64) -> Vector6<f64> {
    let geo = model.geometry();
    let f = rotation_t * geo.gravity_vector() * (geo.density * geo.area(x));
    Vector6::new(0.0, 0.0, 0.0, f.x, f.y, f.z)
}

pub fn mass_matrix(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dims(model, q, None)?;
    let n = model.dof();
    let mut mass = DMatrix::zeros(n, n);
    let reference = model.basis().reference().to_vector();
    let opts = SweepOptions { jacobian: true, ..Default::default() };
    sweep(&model.dyn_grid, &reference, q, opts, |k, s| {
        let node = &model.nodes[k];
        let mj = weighted_rows(&node.inertia, &s.jacobian);
        mass.gemm_tr(node.weight, &s.jacobian, &mj, 1.0);
    });
    Ok(symmetrize(mass))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `C = sum w J^T (Mc Jdot + (Mc ad_eta - ad_eta^T Mc) J)`, the factorization
/// for which `Mdot - 2C` is skew-symmetric.
pub fn coriolis_matrix(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(model, q, Some(qdot))?;
    let n = model.dof();
    let mut c = DMatrix::zeros(n, n);
    let reference = model.basis().reference().to_vector();
    let opts = SweepOptions { jacobian: true, qdot: Some(qdot), full_jdot: true };
    sweep(&model.dyn_grid, &reference, q, opts, |k, s| {
        let node = &model.nodes[k];
        let mc = Matrix6::from_diagonal(&node.inertia);
        let ad = ad_vec(&s.twist);
        let coupling = mc * ad - ad.transpose() * mc;
        let jdot = s.jdot.as_ref().expect("requested");
        let inner = mc * jdot + coupling * &s.jacobian;
        c.gemm_tr(node.weight, &s.jacobian, &inner, 1.0);
    });
    Ok(c)
}

pub fn stiffness_matrix(model: &RobotModel) -> DMatrix<f64> {
    model.stiffness().clone()
}

pub fn damping_matrix(model: &RobotModel) -> DMatrix<f64> {
    model.damping().clone()
}

/// `F(q) = dU/dq` for the gravitational potential `U`.
pub fn gravity_vector(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    check_dims(model, q, None)?;
    let mut f = DVector::zeros(model.dof());
    let reference = model.basis().reference().to_vector();
    let opts = SweepOptions { jacobian: true, ..Default::default() };
    sweep(&model.dyn_grid, &reference, q, opts, |k, s| {
        let node = &model.nodes[k];
        let w = gravity_wrench(model, &s.pose.rotation.transpose(), node.x);
        f.gemv_tr(-node.weight, &s.jacobian, &w, 1.0);
    });
    Ok(f)
}

/// Gravitational potential `U = -int rho A g . p dX`, zero when the rod
/// lies on the base plane.
pub fn potential_energy(model: &RobotModel, q: &DVector<f64>) -> Result<f64> {
    check_dims(model, q, None)?;
    let geo = model.geometry();
    let g = geo.gravity_vector();
    let mut u = 0.0;
    let reference = model.basis().reference().to_vector();
    sweep(&model.dyn_grid, &reference, q, SweepOptions::default(), |k, s| {
        let node = &model.nodes[k];
        u -= node.weight * geo.density * geo.area(node.x) * g.dot(&s.pose.position);
    });
    Ok(u)
}

pub fn elastic_energy(model: &RobotModel, q: &DVector<f64>) -> f64 {
    0.5 * q.dot(&(model.stiffness() * q))
}

pub fn kinetic_energy(model: &RobotModel, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<f64> {
    Ok(0.5 * qdot.dot(&(mass_matrix(model, q)? * qdot)))
}

/// Full set of matrices at `(q, qdot)`, actuation included.
pub fn evaluate(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<DynamicsMatrices> {
    Ok(DynamicsMatrices {
        mass: mass_matrix(model, q)?,
        coriolis: coriolis_matrix(model, q, qdot)?,
        damping: damping_matrix(model),
        stiffness: stiffness_matrix(model),
        gravity: gravity_vector(model, q)?,
        actuation: actuation::actuation_matrix(model, q)?,
    })
}

/// Terms needed for time integration, from a single sweep.
#[derive(Clone, Debug)]
pub(crate) struct RateTerms {
    pub mass: DMatrix<f64>,
    /// `C(q, qdot) qdot + F(q)`.
    pub bias: DVector<f64>,
}

pub(crate) fn rate_terms(model: &RobotModel, q: &DVector<f64>, qdot: &DVector<f64>) -> RateTerms {
    let n = model.dof();
    let mut mass = DMatrix::zeros(n, n);
    let mut bias = DVector::zeros(n);
    let reference = model.basis().reference().to_vector();
    let opts = SweepOptions { jacobian: true, qdot: Some(qdot), full_jdot: false };
    sweep(&model.dyn_grid, &reference, q, opts, |k, s| {
        let node = &model.nodes[k];
        let mj = weighted_rows(&node.inertia, &s.jacobian);
        mass.gemm_tr(node.weight, &s.jacobian, &mj, 1.0);
        let momentum = s.twist.component_mul(&node.inertia);
        let wrench = s.jdot_qdot.component_mul(&node.inertia)
            - ad_vec(&s.twist).transpose() * momentum
            - gravity_wrench(model, &s.pose.rotation.transpose(), node.x);
        bias.gemv_tr(node.weight, &s.jacobian, &wrench, 1.0);
    });
    RateTerms { mass: symmetrize(mass), bias }
}

pub(crate) fn solve_mass(mass: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    match mass.clone().cholesky() {
        Some(chol) => Ok(chol.solve(rhs)),
        None => {
            let eig = mass.symmetric_eigenvalues();
            let (lo, hi) = (eig.min(), eig.max());
            Err(Error::SingularMass { condition: if lo > 0.0 { hi / lo } else { f64::INFINITY } })
        }
    }
}

/// `qdd = M^-1 (A u - (C + D) qd - K q - F)`.
pub fn forward_dynamics(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(model, q, Some(qdot))?;
    if u.len() != model.actuators() {
        return Err(Error::Config(format!(
            "input has {} entries, model has {} tendons",
            u.len(),
            model.actuators()
        )));
    }
    let terms = rate_terms(model, q, qdot);
    let mut rhs = -terms.bias - model.damping() * qdot - model.stiffness() * q;
    if u.iter().any(|&v| v != 0.0) {
        rhs += actuation::actuation_matrix(model, q)? * u;
    }
    solve_mass(terms.mass, &rhs)
}

/// Kinetic energy by a refined quadrature of `1/2 int eta^T Mc eta dX`
/// that does not go through `M`.
pub fn kinetic_energy_refined(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    nodes: usize,
) -> Result<f64> {
    check_dims(model, q, Some(qdot))?;
    let rule = crate::quadrature::GaussRule::on_interval(nodes, 0.0, model.length());
    let grid = Grid::new(model.basis(), rule.nodes.clone());
    let reference = model.basis().reference().to_vector();
    let mut e = 0.0;
    let opts = SweepOptions { jacobian: true, qdot: Some(qdot), full_jdot: false };
    sweep(&grid, &reference, q, opts, |k, s| {
        let inertia = model.geometry().inertia_density(rule.nodes[k]);
        e += 0.5 * rule.weights[k] * s.twist.dot(&s.twist.component_mul(&inertia));
    });
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BasisConfig, ModelConfig, StrainComponent};
    use std::f64::consts::PI;

    fn vec_from(seed: u64, n: usize, scale: f64) -> DVector<f64> {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        DVector::from_fn(n, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2.0 * scale
        })
    }

    fn model_with(f: impl FnOnce(&mut ModelConfig)) -> RobotModel {
        let mut cfg = ModelConfig::default();
        f(&mut cfg);
        RobotModel::new(cfg).unwrap()
    }

    #[test]
    fn inertia_at_base_and_taper() {
        let model = RobotModel::default();
        let m0 = cross_section_inertia(&model, 0.0).unwrap();
        let a = PI * 0.016f64.powi(2);
        assert!((m0[(3, 3)] - 1070.0 * a).abs() < 1e-12);
        let m1 = cross_section_inertia(&model, 0.2).unwrap();
        assert!((0..6).all(|i| m1[(i, i)] < m0[(i, i)]));
        assert!(cross_section_inertia(&model, 0.4).is_err());
    }

    #[test]
    fn mass_symmetric_positive() {
        let model = RobotModel::default();
        let q = vec_from(1, model.dof(), 3.0);
        let m = mass_matrix(&model, &q).unwrap();
        assert!((&m - m.transpose()).norm() < 1e-12 * m.norm());
        assert!(m.clone().cholesky().is_some());
        let m0 = mass_matrix(&model, &DVector::zeros(model.dof())).unwrap();
        assert!(m0.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn kinetic_energy_matches_refined_quadrature() {
        let model = RobotModel::default();
        let q = vec_from(2, model.dof(), 3.0);
        let qd = vec_from(3, model.dof(), 1.0);
        let coarse = kinetic_energy(&model, &q, &qd).unwrap();
        let fine = kinetic_energy_refined(&model, &q, &qd, 330).unwrap();
        assert!((coarse - fine).abs() < 1e-6 * fine);
    }

    #[test]
    fn coriolis_vanishes_at_rest_and_is_linear() {
        let model = RobotModel::default();
        let n = model.dof();
        let q = vec_from(4, n, 3.0);
        assert_eq!(coriolis_matrix(&model, &q, &DVector::zeros(n)).unwrap().norm(), 0.0);
        let qd = vec_from(5, n, 1.0);
        let c1 = coriolis_matrix(&model, &q, &qd).unwrap();
        let c2 = coriolis_matrix(&model, &q, &(&qd * 2.5)).unwrap();
        assert!((c2 - &c1 * 2.5).norm() < 1e-12 * c1.norm().max(1e-300));
    }

    #[test]
    fn passivity_identity() {
        let model = RobotModel::default();
        let n = model.dof();
        let q = vec_from(6, n, 3.0);
        let qd = vec_from(7, n, 1.0);
        let eps = 1e-6;
        let mdot = (mass_matrix(&model, &(&q + &qd * eps)).unwrap()
            - mass_matrix(&model, &(&q - &qd * eps)).unwrap())
            / (2.0 * eps);
        let c = coriolis_matrix(&model, &q, &qd).unwrap();
        let s = &mdot - &c * 2.0;
        let z = vec_from(8, n, 1.0);
        assert!(z.dot(&(&s * &z)).abs() < 1e-7 * mdot.norm() * z.norm_squared());
    }

    #[test]
    fn fast_bias_matches_matrices() {
        let model = RobotModel::default();
        let n = model.dof();
        let q = vec_from(9, n, 3.0);
        let qd = vec_from(10, n, 1.0);
        let terms = rate_terms(&model, &q, &qd);
        let expect = coriolis_matrix(&model, &q, &qd).unwrap() * &qd
            + gravity_vector(&model, &q).unwrap();
        assert!((&terms.bias - &expect).norm() < 1e-12 * expect.norm());
        assert!((terms.mass - mass_matrix(&model, &q).unwrap()).norm() < 1e-14);
    }

    #[test]
    fn cylinder_bending_stiffness_closed_form() {
        let r = 0.01;
        let model = model_with(|c| {
            c.geometry.base_radius = r;
            c.geometry.tip_radius = r;
            c.basis = BasisConfig::only(&[(StrainComponent::BendX, 0)]);
        });
        let k = stiffness_matrix(&model);
        let exact = 83.0e3 * PI * r.powi(4) / 4.0 * 0.38;
        assert!((k[(0, 0)] - exact).abs() < 1e-12 * exact);
    }

    #[test]
    fn stiffness_linear_in_modulus() {
        let a = RobotModel::default();
        let b = model_with(|c| {
            c.geometry.young_modulus *= 2.0;
            c.geometry.shear_modulus *= 2.0;
        });
        assert!((stiffness_matrix(&b) - stiffness_matrix(&a) * 2.0).norm() < 1e-12 * stiffness_matrix(&b).norm());
        assert!(stiffness_matrix(&a).cholesky().is_some());
        let d = damping_matrix(&a);
        assert!((d - stiffness_matrix(&a) * 0.05).norm() == 0.0);
    }

    #[test]
    fn gravity_zero_and_symmetric() {
        let model = model_with(|c| c.geometry.gravity = [0.0; 3]);
        let q = vec_from(11, model.dof(), 2.0);
        assert_eq!(gravity_vector(&model, &q).unwrap().norm(), 0.0);
        let hanging = RobotModel::default();
        let f = gravity_vector(&hanging, &DVector::zeros(hanging.dof())).unwrap();
        for (i, mode) in hanging.basis().modes().iter().enumerate() {
            if mode.component != StrainComponent::Axial {
                assert!(f[i].abs() < 1e-15, "mode {i}");
            }
        }
    }

    #[test]
    fn gravity_is_potential_gradient() {
        let model = model_with(|c| c.geometry.gravity = [3.0, -4.0, 8.0]);
        let n = model.dof();
        let q = vec_from(12, n, 3.0);
        let f = gravity_vector(&model, &q).unwrap();
        let eps = 1e-6;
        let fd = DVector::from_fn(n, |i, _| {
            let mut dq = DVector::zeros(n);
            dq[i] = eps;
            (potential_energy(&model, &(&q + &dq)).unwrap()
                - potential_energy(&model, &(&q - &dq)).unwrap())
                / (2.0 * eps)
        });
        assert!((&fd - &f).norm() < 1e-5 * f.norm());
    }

    #[test]
    fn unloaded_rest_is_equilibrium() {
        let model = model_with(|c| c.geometry.gravity = [0.0; 3]);
        let n = model.dof();
        let z = DVector::zeros(n);
        let qdd = forward_dynamics(&model, &z, &z, &DVector::zeros(4)).unwrap();
        assert_eq!(qdd.norm(), 0.0);
        assert!(forward_dynamics(&model, &z, &z, &DVector::zeros(3)).is_err());
    }
}
