//! Two control layers: the collocated P-satI-D+ shape regulator and the
//! underactuated closed-loop inverse kinematics (CLIK) on reference
//! configurations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::collocated;
use crate::error::{Error, Result};
use crate::kinematics::{task_jacobian, task_map, TaskSelector};
use crate::model::RobotModel;

/// Diagonal regulator gains.
#[derive(Clone, Debug, PartialEq)]
pub struct RegulatorGains {
    pub proportional: DVector<f64>,
    pub integral: DVector<f64>,
    pub derivative: DVector<f64>,
}

impl RegulatorGains {
    pub fn new(
        proportional: DVector<f64>,
        integral: DVector<f64>,
        derivative: DVector<f64>,
    ) -> Result<Self> {
        let na = proportional.len();
        if integral.len() != na || derivative.len() != na {
            return Err(Error::Config("regulator gain dimensions differ".into()));
        }
        if proportional.iter().any(|&g| !(g > 0.0 && g.is_finite()))
            || integral.iter().any(|&g| !(g > 0.0 && g.is_finite()))
            || derivative.iter().any(|&g| !(g >= 0.0 && g.is_finite()))
        {
            return Err(Error::Config(
                "regulator gains need proportional > 0, integral > 0, derivative >= 0".into(),
            ));
        }
        Ok(Self { proportional, integral, derivative })
    }

    pub fn uniform(na: usize, p: f64, i: f64, d: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(na, p),
            DVector::from_element(na, i),
            DVector::from_element(na, d),
        )
    }

    pub fn actuators(&self) -> usize {
        self.proportional.len()
    }
}

/// Admissible tendon input range, in the signed convention (pulling < 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputLimits {
    pub min: f64,
    pub max: f64,
}

impl Default for InputLimits {
    fn default() -> Self {
        Self { min: -5.0, max: 0.0 }
    }
}

impl InputLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.min <= self.max && self.min.is_finite() && self.max.is_finite()) {
            return Err(Error::Config("input limits need min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegulatorState {
    /// Running integral of `tanh(theta_d - theta)`.
    pub integral: DVector<f64>,
    pub last_command: DVector<f64>,
}

impl RegulatorState {
    pub fn new(na: usize) -> Self {
        Self { integral: DVector::zeros(na), last_command: DVector::zeros(na) }
    }
}

/// `u = G_P e + G_I int tanh(e) - G_D thd_a + ff`, clamped to `limits`.
///
/// The integral of a component is frozen while its command is clamped and
/// the error pushes further into the clamp.
#[allow(clippy::too_many_arguments)]
pub fn psat_id_plus(
    gains: &RegulatorGains,
    state: &mut RegulatorState,
    theta_d: &DVector<f64>,
    theta: &DVector<f64>,
    theta_dot: &DVector<f64>,
    feedforward: &DVector<f64>,
    limits: &InputLimits,
    dt: f64,
) -> DVector<f64> {
    let na = gains.actuators();
    let mut u = DVector::zeros(na);
    for k in 0..na {
        let e = theta_d[k] - theta[k];
        let raw = gains.proportional[k] * e + gains.integral[k] * state.integral[k]
            - gains.derivative[k] * theta_dot[k]
            + feedforward[k];
        let step = dt * e.tanh();
        let pushing = (raw > limits.max && step > 0.0) || (raw < limits.min && step < 0.0);
        if !pushing {
            state.integral[k] += step;
        }
        u[k] = raw.clamp(limits.min, limits.max);
    }
    state.last_command = u.clone();
    u
}

/// Feedforward at the target, `K_theta_a(q_d) + F_theta_a(q_d)`: the input
/// that holds `q_d` statically.
pub fn feedforward(model: &RobotModel, q_d: &DVector<f64>) -> Result<DVector<f64>> {
    collocated::static_input(model, q_d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClikGains {
    /// Task-error gain, one entry per task coordinate (1/s).
    pub task: DVector<f64>,
    /// Equilibrium-residual gain, one entry per unactuated coordinate.
    pub equilibrium: DVector<f64>,
    /// Damping of the pseudo-inverses.
    pub damping: f64,
}

impl ClikGains {
    pub fn new(task: DVector<f64>, equilibrium: DVector<f64>, damping: f64) -> Result<Self> {
        if task.iter().chain(equilibrium.iter()).any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::Config("CLIK gains must be positive".into()));
        }
        if !(damping > 0.0 && damping.is_finite()) {
            return Err(Error::Config("CLIK damping must be positive".into()));
        }
        Ok(Self { task, equilibrium, damping })
    }

    pub fn uniform(m: usize, unactuated: usize, task: f64, equilibrium: f64, damping: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(m, task),
            DVector::from_element(unactuated, equilibrium),
            damping,
        )
    }
}

/// Rank threshold relative to the largest singular value.
const RANK_TOL: f64 = 1e-10;

fn null_projector(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols();
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.expect("computed");
    let smax = svd.singular_values.max();
    let mut p = DMatrix::identity(n, n);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > RANK_TOL * smax {
            let v = vt.row(i);
            p -= v.transpose() * v;
        }
    }
    p
}

fn full_row_rank(y: &DMatrix<f64>, what: &str) -> Result<()> {
    let sv = y.clone().singular_values();
    let smax = sv.max();
    if !(sv.min() > RANK_TOL * smax) || smax == 0.0 || sv.len() < y.nrows() {
        return Err(Error::RankCollapse(format!(
            "{what} has singular values [{:e}, {:e}]",
            sv.min(),
            smax
        )));
    }
    Ok(())
}

/// `Y^T (Y Y^T + l^2 I)^-1`.
fn damped_pinv(y: &DMatrix<f64>, damping: f64) -> Result<DMatrix<f64>> {
    let m = y.nrows();
    let gram = y * y.transpose() + DMatrix::identity(m, m) * (damping * damping);
    let inv = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("damped Gram matrix not positive definite".into()))?
        .inverse();
    Ok(y.transpose() * inv)
}

/// Projected inverses `(P_eps, P_Z)`: `J_G P_eps = 0`, `J_x P_Z = 0`,
/// `J_x P_eps ~ I`, `J_G P_Z ~ I`.
#[derive(Clone, Debug)]
pub struct Projectors {
    pub task: DMatrix<f64>,
    pub equilibrium: DMatrix<f64>,
}

pub fn clik_projectors(jx: &DMatrix<f64>, jg: &DMatrix<f64>, damping: f64) -> Result<Projectors> {
    if jx.ncols() != jg.ncols() {
        return Err(Error::Config("task and equilibrium Jacobians differ in width".into()));
    }
    let n_g = null_projector(jg);
    let n_x = null_projector(jx);
    let jx_ng = jx * &n_g;
    full_row_rank(&jx_ng, "J_x N_G")?;
    let task = &n_g * damped_pinv(&jx_ng, damping)?;
    let equilibrium = &n_x * damped_pinv(&(jg * &n_x), damping)?;
    Ok(Projectors { task, equilibrium })
}

/// Quantities entering one CLIK update at `q`.
#[derive(Clone, Debug)]
pub struct ClikJacobians {
    /// Model task coordinates `h_g(q)`.
    pub x: DVector<f64>,
    /// `dx/dtheta`.
    pub task: DMatrix<f64>,
    /// `G_theta_u(q)`.
    pub residual: DVector<f64>,
    /// `dG_theta_u/dtheta`.
    pub equilibrium: DMatrix<f64>,
    pub jh_inv: DMatrix<f64>,
}

const FD_STEP: f64 = 1e-6;

pub fn clik_jacobians(
    model: &RobotModel,
    q: &DVector<f64>,
    selector: &TaskSelector,
) -> Result<ClikJacobians> {
    let n = model.dof();
    let na = model.actuators();
    let nu = n - na;
    let jac = collocated::jacobian_h(model, q)?;
    let (x, dxdq) = task_jacobian(model, q, selector)?;
    let (g, _) = collocated::g_theta_unchecked(model, q)?;
    let mut dgdq = DMatrix::zeros(nu, n);
    for i in 0..n {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[i] += FD_STEP;
        qm[i] -= FD_STEP;
        let (gp, _) = collocated::g_theta_unchecked(model, &qp)?;
        let (gm, _) = collocated::g_theta_unchecked(model, &qm)?;
        dgdq.set_column(i, &((gp.rows(na, nu) - gm.rows(na, nu)) / (2.0 * FD_STEP)));
    }
    Ok(ClikJacobians {
        x,
        task: dxdq * &jac.jh_inv,
        residual: g.rows(na, nu).clone_owned(),
        equilibrium: dgdq * &jac.jh_inv,
        jh_inv: jac.jh_inv,
    })
}

/// Result of one CLIK update.
#[derive(Clone, Debug)]
pub struct ClikStep {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    /// Task error used in the update.
    pub task_error: DVector<f64>,
    /// `G_theta_u` at the start of the update.
    pub residual: DVector<f64>,
}

/// One explicit Euler step of
/// `theta_dot = P_eps G_Z (x_d - x) - P_Z G_eps G_theta_u`, `q_dot = J_h^-1 theta_dot`.
/// `x` comes from `measured` when given, else from the model.
pub fn clik_step(
    model: &RobotModel,
    gains: &ClikGains,
    selector: &TaskSelector,
    q_ref: &DVector<f64>,
    measured: Option<&DVector<f64>>,
    x_d: &DVector<f64>,
    dt: f64,
) -> Result<ClikStep> {
    let m = selector.dim();
    if x_d.len() != m || gains.task.len() != m || measured.is_some_and(|x| x.len() != m) {
        return Err(Error::Config(format!("task vectors must have {m} entries")));
    }
    if gains.equilibrium.len() != model.dof() - model.actuators() {
        return Err(Error::Config("equilibrium gain dimension mismatch".into()));
    }
    let jac = clik_jacobians(model, q_ref, selector)?;
    let x = measured.unwrap_or(&jac.x);
    let task_error = x_d - x;
    let proj = clik_projectors(&jac.task, &jac.equilibrium, gains.damping)?;
    let theta_dot = &proj.task * task_error.component_mul(&gains.task)
        - &proj.equilibrium * jac.residual.component_mul(&gains.equilibrium);
    let qdot = &jac.jh_inv * theta_dot;
    Ok(ClikStep { q: q_ref + &qdot * dt, qdot, task_error, residual: jac.residual })
}

/// Stopping rule for offline CLIK.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceOptions {
    pub max_iterations: usize,
    pub dt: f64,
    /// Task error norm (m).
    pub task_tol: f64,
    /// `|G_theta_u|` norm.
    pub residual_tol: f64,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self { max_iterations: 5000, dt: 0.01, task_tol: 1e-7, residual_tol: 1e-9 }
    }
}

#[derive(Clone, Debug)]
pub struct Converged {
    pub q: DVector<f64>,
    pub iterations: usize,
    pub task_error: f64,
    pub residual: f64,
}

/// Runs CLIK on the model alone until both the task error and the
/// equilibrium residual are below tolerance.
pub fn precompute_reference(
    model: &RobotModel,
    gains: &ClikGains,
    selector: &TaskSelector,
    x_d: &DVector<f64>,
    q0: &DVector<f64>,
    opts: &ConvergenceOptions,
) -> Result<Converged> {
    let mut q = q0.clone();
    let mut last = (f64::INFINITY, f64::INFINITY);
    for it in 0..=opts.max_iterations {
        let x = task_map(model, &q, selector)?;
        let e = (x_d - &x).norm();
        let r = collocated::g_theta_u(model, &q)?.norm();
        last = (e, r);
        if e < opts.task_tol && r < opts.residual_tol {
            return Ok(Converged { q, iterations: it, task_error: e, residual: r });
        }
        if it == opts.max_iterations {
            break;
        }
        q = clik_step(model, gains, selector, &q, Some(&x), x_d, opts.dt)?.q;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("CLIK iterate became non-finite".into()));
        }
    }
    Err(Error::NotConverged { iterations: opts.max_iterations, residual: last.0.max(last.1) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gains_validated() {
        assert!(RegulatorGains::uniform(2, 1.0, 1.0, 0.0).is_ok());
        assert!(RegulatorGains::uniform(2, 0.0, 1.0, 0.0).is_err());
        assert!(RegulatorGains::uniform(2, 1.0, 0.0, 0.0).is_err());
        assert!(RegulatorGains::uniform(2, 1.0, 1.0, -1.0).is_err());
        assert!(ClikGains::uniform(2, 8, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn pure_feedforward_at_target() {
        let gains = RegulatorGains::uniform(2, 40.0, 5.0, 1.0).unwrap();
        let mut st = RegulatorState::new(2);
        let th = DVector::from_vec(vec![0.3, 0.31]);
        let ff = DVector::from_vec(vec![-1.2, -0.4]);
        let u = psat_id_plus(&gains, &mut st, &th, &th, &DVector::zeros(2), &ff, &InputLimits::default(), 1e-3);
        assert_eq!(u, ff);
        assert_eq!(st.integral, DVector::zeros(2));
    }

    #[test]
    fn integral_increment_bounded_and_clamped() {
        let gains = RegulatorGains::uniform(1, 1e3, 5.0, 0.0).unwrap();
        let mut st = RegulatorState::new(1);
        let dt = 1e-3;
        let lim = InputLimits::default();
        let d = DVector::from_element(1, 0.0);
        let u = psat_id_plus(&gains, &mut st, &d, &DVector::from_element(1, 1e4), &d, &d, &lim, dt);
        assert_eq!(u[0], -5.0);
        // Error pushes into the clamp: integral frozen.
        assert_eq!(st.integral[0], 0.0);
        let mut st = RegulatorState::new(1);
        let u = psat_id_plus(&gains, &mut st, &d, &DVector::from_element(1, 1e-3), &d, &d, &lim, dt);
        assert!(u[0] <= 0.0 && u[0] >= -5.0);
        assert!(st.integral[0].abs() <= dt);
    }

    #[test]
    fn projectors_without_equilibrium_gradient() {
        let jx = DMatrix::from_row_slice(2, 4, &[1.0, 0.2, 0.0, 0.1, 0.0, 1.0, 0.3, 0.0]);
        let jg = DMatrix::zeros(2, 4);
        let lam = 1e-6;
        let p = clik_projectors(&jx, &jg, lam).unwrap();
        let pinv = damped_pinv(&jx, lam).unwrap();
        assert!((&p.task - &pinv).norm() < 1e-15);
        assert_eq!(p.equilibrium.norm(), 0.0);
        let exact = jx.clone().pseudo_inverse(1e-14).unwrap();
        assert!((pinv - exact).norm() < 1e-10);
        let flat = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert!(matches!(clik_projectors(&flat, &jg, lam), Err(Error::RankCollapse(_))));
    }

    #[test]
    fn projectors_decouple() {
        let jx = DMatrix::from_fn(3, 8, |i, j| (((i * 8 + j) as f64).powi(2) * 0.7).sin());
        let jg = DMatrix::from_fn(4, 8, |i, j| (((i * 8 + j) as f64).powi(2) * 1.3).cos());
        let p = clik_projectors(&jx, &jg, 1e-6).unwrap();
        assert!((&jg * &p.task).norm() < 1e-12 * jg.norm());
        assert!((&jx * &p.equilibrium).norm() < 1e-12 * jx.norm());
        assert!((&jx * &p.task - DMatrix::identity(3, 3)).norm() < 1e-8);
        assert!((&jg * &p.equilibrium - DMatrix::identity(4, 4)).norm() < 1e-8);
    }
}
