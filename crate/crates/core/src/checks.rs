//! Property and behavioral suites with their tolerances and runtime
//! budgets. Shared by `strainsim check` and the acceptance test.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix4, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actuation;
use crate::collocated;
use crate::control;
use crate::dynamics;
use crate::error::Result;
use crate::kinematics::{self, Axis, TaskOutput, TaskSelector};
use crate::liegroup::{adjoint_big, exp_se3, hat, Twist};
use crate::model::{BasisConfig, ModelConfig, RobotModel, StrainComponent};
use crate::scenarios::{self, Mode, Phase, ScenarioMetrics, ScenarioSpec};
use crate::sim::{self, Integrator, State};

/// One measured quantity against its limit; passes when `value < limit`.
#[derive(Clone, Debug)]
pub struct Item {
    pub label: String,
    pub value: f64,
    pub limit: f64,
}

impl Item {
    pub fn passed(&self) -> bool {
        self.value < self.limit
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub budget: Duration,
    pub elapsed: Duration,
    pub items: Vec<Item>,
    pub failure: Option<String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.elapsed <= self.budget && self.items.iter().all(Item::passed)
    }

    /// One-line summary followed by the failing items.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} {} ({:.1} s of {:.0} s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs_f64()
        );
        if let Some(f) = &self.failure {
            s.push_str(&format!(": {f}"));
        }
        for it in self.items.iter().filter(|i| !i.passed()) {
            s.push_str(&format!("\n    {}: {:e} (limit {:e})", it.label, it.value, it.limit));
        }
        s
    }
}

pub struct Suite {
    pub name: &'static str,
    pub budget: Duration,
    pub run: fn() -> Result<Vec<Item>>,
}

impl Suite {
    pub fn execute(&self) -> SuiteOutcome {
        let t = Instant::now();
        let res = (self.run)();
        let elapsed = t.elapsed();
        let (items, failure) = match res {
            Ok(items) => (items, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        SuiteOutcome { name: self.name, budget: self.budget, elapsed, items, failure }
    }
}

/// Model-level suites, fast enough for `strainsim check`.
pub fn property_suites() -> Vec<Suite> {
    let s = Duration::from_secs;
    vec![
        Suite { name: "lie group", budget: s(1), run: lie_group },
        Suite { name: "kinematics", budget: s(10), run: kinematics_suite },
        Suite { name: "dynamics", budget: s(60), run: dynamics_suite },
        Suite { name: "actuation", budget: s(30), run: actuation_suite },
        Suite { name: "collocated", budget: s(30), run: collocated_suite },
        Suite { name: "control", budget: s(120), run: control_suite },
    ]
}

pub fn behavioral_suite() -> Suite {
    Suite { name: "behavioral analogs", budget: Duration::from_secs(600), run: behavioral }
}

fn item(label: impl Into<String>, value: f64, limit: f64) -> Item {
    // NaN never passes.
    let value = if value.is_nan() { f64::INFINITY } else { value };
    Item { label: label.into(), value, limit }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn random_twist(r: &mut ChaCha8Rng, scale: f64) -> Twist {
    let mut v = || r.random_range(-scale..scale);
    Twist::new(Vector3::new(v(), v(), v()), Vector3::new(v(), v(), v()))
}

fn random_q(r: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.random_range(-scale..scale))
}

/// Random configuration with per-component scales: bending and torsion
/// strains up to `bend` (1/m), axial strain up to 5 %.
fn physical_q(r: &mut ChaCha8Rng, model: &RobotModel, bend: f64) -> DVector<f64> {
    let modes = model.basis().modes();
    DVector::from_fn(modes.len(), |i, _| {
        let s = match modes[i].component {
            StrainComponent::Axial | StrainComponent::ShearX | StrainComponent::ShearY => 0.05,
            _ => bend,
        };
        r.random_range(-s..s)
    })
}

fn lie_group() -> Result<Vec<Item>> {
    let mut r = rng();
    let (mut ortho, mut compose, mut deriv) = (0.0_f64, 0.0_f64, 0.0_f64);
    for k in 0..200 {
        let scale = if k % 2 == 0 { 3.0 } else { 1e-3 };
        let a = random_twist(&mut r, scale);
        let b = random_twist(&mut r, 2.0);
        let ga = exp_se3(&a, 1.0);
        let gb = exp_se3(&b, 0.7);
        ortho = ortho.max(ga.orthonormality_error()).max((ga.rotation.determinant() - 1.0).abs());
        let lhs = adjoint_big(&(&ga * &gb));
        let rhs = adjoint_big(&ga) * adjoint_big(&gb);
        compose = compose.max((lhs - rhs).abs().max());
        let h = 1e-5;
        let fd: Matrix4<f64> =
            (exp_se3(&b, h).to_homogeneous() - exp_se3(&b, -h).to_homogeneous()) / (2.0 * h);
        deriv = deriv.max((fd - hat(&b)).abs().max());
    }
    Ok(vec![
        item("exp orthonormality", ortho, 1e-10),
        item("Adjoint composition", compose, 1e-8),
        item("derivative at zero", deriv, 1e-6),
    ])
}

/// Body Jacobian from central differences of the pose.
fn jacobian_fd(model: &RobotModel, q: &DVector<f64>, x: f64) -> Result<DMatrix<f64>> {
    let n = q.len();
    let g = kinematics::forward_kinematics(model, q, x)?;
    let ginv = g.inverse().to_homogeneous();
    let h = 1e-6;
    let mut out = DMatrix::zeros(6, n);
    for i in 0..n {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[i] += h;
        qm[i] -= h;
        let d = (kinematics::forward_kinematics(model, &qp, x)?.to_homogeneous()
            - kinematics::forward_kinematics(model, &qm, x)?.to_homogeneous())
            / (2.0 * h);
        let m = ginv * d;
        out.set_column(i, &Vector6::new(m[(2, 1)], m[(0, 2)], m[(1, 0)], m[(0, 3)], m[(1, 3)], m[(2, 3)]));
    }
    Ok(out)
}

fn kinematics_suite() -> Result<Vec<Item>> {
    let mut cfg = ModelConfig::default();
    cfg.basis = BasisConfig::only(&[(StrainComponent::BendX, 0)]);
    cfg.numerics.fk_intervals = 64;
    let arc = RobotModel::new(cfg)?;
    let mut arc_err = 0.0_f64;
    for kappa in [0.5, 3.0, 9.0, 16.0] {
        let q = DVector::from_element(1, kappa);
        for x in [0.1, 0.25, arc.length()] {
            let p = kinematics::forward_kinematics(&arc, &q, x)?.position;
            let exact = Vector3::new(0.0, ((kappa * x).cos() - 1.0) / kappa, (kappa * x).sin() / kappa);
            arc_err = arc_err.max((p - exact).norm());
        }
    }
    let model = RobotModel::default();
    let mut r = rng();
    let mut jac_err = 0.0_f64;
    for _ in 0..100 {
        let q = random_q(&mut r, model.dof(), 6.0);
        let x = r.random_range(0.05..=model.length());
        let j = kinematics::body_jacobian(&model, &q, x)?;
        let fd = jacobian_fd(&model, &q, x)?;
        jac_err = jac_err.max((DMatrix::from_iterator(6, j.ncols(), j.iter().copied()) - &fd).norm() / fd.norm());
    }
    Ok(vec![
        item("constant-curvature arc (m)", arc_err, 1e-8),
        item("Jacobian vs finite differences (relative)", jac_err, 1e-5),
    ])
}

fn dynamics_suite() -> Result<Vec<Item>> {
    let model = RobotModel::default();
    let n = model.dof();
    let mut r = rng();
    let mut spd = 0.0_f64;
    let mut skew = 0.0_f64;
    let mut grav = 0.0_f64;
    for _ in 0..20 {
        let q = random_q(&mut r, n, 5.0);
        let qd = random_q(&mut r, n, 2.0);
        let z = random_q(&mut r, n, 1.0);
        let m = dynamics::mass_matrix(&model, &q)?;
        let asym = (&m - m.transpose()).abs().max() / m.abs().max();
        let min_eig = m.clone().symmetric_eigenvalues().min();
        spd = spd.max(asym).max(if min_eig > 0.0 { 0.0 } else { 1.0 });
        let h = 1e-6;
        let mdot = (dynamics::mass_matrix(&model, &(&q + &qd * h))? - dynamics::mass_matrix(&model, &(&q - &qd * h))?)
            / (2.0 * h);
        let c = dynamics::coriolis_matrix(&model, &q, &qd)?;
        let res = z.dot(&((&mdot - &c * 2.0) * &z)).abs() / (z.norm_squared() * mdot.norm());
        skew = skew.max(res);
        let f = dynamics::gravity_vector(&model, &q)?;
        let grad = DVector::from_fn(n, |i, _| {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            (dynamics::potential_energy(&model, &qp).unwrap() - dynamics::potential_energy(&model, &qm).unwrap())
                / (2.0 * h)
        });
        grav = grav.max((&f - grad).norm() / f.norm());
    }

    let mut cfg = ModelConfig::default();
    cfg.geometry.gravity = [0.0; 3];
    cfg.damping_time = 0.0;
    let free = RobotModel::new(cfg)?;
    let energy = |s: &State| -> Result<f64> {
        Ok(dynamics::kinetic_energy(&free, &s.q, &s.qdot)? + dynamics::elastic_energy(&free, &s.q))
    };
    let mut state = State { t: 0.0, q: physical_q(&mut r, &free, 3.0), qdot: physical_q(&mut r, &free, 1.0) };
    let e0 = energy(&state)?;
    let zero = DVector::zeros(free.actuators());
    let mut drift = 0.0_f64;
    for k in 1..=10_000 {
        state = sim::step(&free, &state, &zero, 1e-4, Integrator::Rk4)?;
        if k % 100 == 0 {
            drift = drift.max((energy(&state)? - e0).abs() / e0);
        }
    }

    let geo = model.geometry();
    let quad: f64 = model.nodes.iter().map(|nd| nd.weight * nd.inertia[3]).sum();
    let mass_err = (quad - geo.total_mass()).abs() / geo.total_mass();
    Ok(vec![
        item("M symmetric positive definite", spd, 1e-12),
        item("z^T (Mdot - 2C) z (normalized)", skew, 1e-7),
        item("energy drift, D = 0, g = 0, 1 s (relative)", drift, 1e-6),
        item("gravity vs potential gradient (relative)", grav, 1e-5),
        item("cone mass quadrature (relative)", mass_err, 1e-10),
    ])
}

fn actuation_suite() -> Result<Vec<Item>> {
    let mut cfg = ModelConfig::default();
    for t in &mut cfg.tendons {
        t.friction = 0.0;
    }
    let frictionless = RobotModel::new(cfg)?;
    let n = frictionless.dof();
    let mut r = rng();
    let (mut integrable, mut coords) = (0.0_f64, 0.0_f64);
    for _ in 0..10 {
        let q = random_q(&mut r, n, 5.0);
        let ev = actuation::evaluate(&frictionless, &q)?;
        let h = 1e-6;
        let mut dl = DMatrix::zeros(n, frictionless.actuators());
        for i in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let d = (actuation::tendon_length(&frictionless, &qp)? - actuation::tendon_length(&frictionless, &qm)?)
                / (2.0 * h);
            dl.set_row(i, &d.transpose());
        }
        integrable = integrable.max((&ev.matrix - &dl).norm() / dl.norm());
        coords = coords.max((&ev.coordinates - &ev.lengths).amax());
    }

    let model = RobotModel::default();
    let mut increase = 0.0_f64;
    for _ in 0..50 {
        let q = random_q(&mut r, model.dof(), 5.0);
        for k in 0..model.actuators() {
            let prof = actuation::friction_profile(&model, k, &q)?;
            for w in prof.windows(2) {
                increase = increase.max((-w[1].1).exp() - (-w[0].1).exp());
            }
        }
    }

    // Constant curvature: a straight tendon follows an arc whose tangent
    // turns by kappa L_t; any tendon's exponent is mu times the total
    // turning of its path, measured here on a fine polyline.
    let mut cfg = ModelConfig::default();
    cfg.basis = BasisConfig::only(&[(StrainComponent::BendX, 0)]);
    let arc = RobotModel::new(cfg)?;
    let (mut arc_err, mut poly_err) = (0.0_f64, 0.0_f64);
    for kappa in [2.0, 5.0, -4.0] {
        let q = DVector::from_element(1, kappa);
        for route in arc.routes() {
            let mu = actuation::friction_exponent(route, &arc, &q, route.termination)?;
            if route.kind == actuation::RouteKind::Straight {
                let estimate = route.friction * kappa.abs() * route.termination;
                arc_err = arc_err.max((mu - estimate).abs() / estimate);
            }
            let k = 4000;
            let pts = (0..=k)
                .map(|i| {
                    let x = route.termination * i as f64 / k as f64;
                    let g = kinematics::forward_kinematics(&arc, &q, x)?;
                    let (d, _) = actuation::tendon_point(route, &arc, x)?;
                    Ok(g.position + g.rotation * d)
                })
                .collect::<Result<Vec<Vector3<f64>>>>()?;
            let turning: f64 = pts
                .windows(3)
                .map(|w| (w[1] - w[0]).angle(&(w[2] - w[1])))
                .sum();
            let estimate = route.friction * turning;
            poly_err = poly_err.max((mu - estimate).abs() / estimate);
        }
    }
    Ok(vec![
        item("frictionless A^T vs dL_c/dq (relative)", integrable, 1e-4),
        item("theta_a - L_c without friction (m)", coords, 1e-12),
        item("increase of exp(-mu_S) along X", increase, 1e-15),
        item("straight-tendon friction exponent vs arc estimate (relative)", arc_err, 0.02),
        item("friction exponent vs polyline turning (relative)", poly_err, 0.02),
    ])
}

fn collocated_suite() -> Result<Vec<Item>> {
    let model = RobotModel::default();
    let n = model.dof();
    let na = model.actuators();
    let mut r = rng();
    let mut input = 0.0_f64;
    for _ in 0..10 {
        let q = random_q(&mut r, n, 4.0);
        let qd = random_q(&mut r, n, 1.0);
        let cd = collocated::partition_dynamics(&model, &q, &qd)?;
        let mut sel = DMatrix::zeros(n, na);
        sel.fill_diagonal(1.0);
        input = input.max((&cd.input - sel).abs().max());
    }

    // q-form against the theta-form with augmented state (q, theta_dot).
    let zero = DVector::zeros(na);
    let q0 = sim::solve_static_equilibrium(&model, &zero, None)?;
    let u = DVector::from_vec(vec![-1.0, -0.5, -0.2, -0.8]);
    let (dt, steps) = (1e-4, 1000);
    let states = sim::rollout(&model, &State::at_rest(q0.clone()), &u, dt, steps, Integrator::Rk4)?;
    let rate = |q: &DVector<f64>, thd: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        let jac = collocated::jacobian_h(&model, q)?;
        let qd = &jac.jh_inv * thd;
        let cd = collocated::partition_dynamics(&model, q, &qd)?;
        Ok((qd, cd.acceleration(thd, &u)?))
    };
    let (mut q, mut thd) = (q0.clone(), DVector::zeros(n));
    let mut dual = 0.0_f64;
    for k in 1..=steps {
        let (k1q, k1v) = rate(&q, &thd)?;
        let (k2q, k2v) = rate(&(&q + &k1q * (0.5 * dt)), &(&thd + &k1v * (0.5 * dt)))?;
        let (k3q, k3v) = rate(&(&q + &k2q * (0.5 * dt)), &(&thd + &k2v * (0.5 * dt)))?;
        let (k4q, k4v) = rate(&(&q + &k3q * dt), &(&thd + &k3v * dt))?;
        q += (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0);
        thd += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0);
        if k % 50 == 0 {
            let s = &states[k];
            let theta_q = collocated::collocated_state(&model, &s.q, &s.qdot)?;
            let theta_t = collocated::collocated_state(&model, &q, &DVector::zeros(n))?;
            let d = (&theta_q.theta_a - &theta_t.theta_a)
                .amax()
                .max((&theta_q.theta_u - &theta_t.theta_u).amax())
                .max((&theta_q.theta_dot - &thd).amax());
            dual = dual.max(d);
        }
    }

    let mut member = 0.0_f64;
    for u in [vec![-0.5, -1.0, 0.0, -2.0], vec![-3.0, 0.0, -1.5, 0.0], vec![0.0; 4]] {
        let q = sim::solve_static_equilibrium(&model, &DVector::from_vec(u), None)?;
        member = member.max(collocated::g_theta_u(&model, &q)?.norm());
    }
    Ok(vec![
        item("transformed input matrix vs [I; 0]", input, 1e-10),
        item("dual-representation rollout, 0.1 s", dual, 1e-6),
        item("|G_theta_u| at Newton equilibria", member, 1e-8),
    ])
}

/// CLIK from `start` towards the equilibrium under `target` tensions; returns
/// the task residual, `|G_theta_u|` and the static balance residual with the
/// input read off the actuated rows.
fn clik_fixed_point(model: &RobotModel, sel: &TaskSelector, start: &[f64], target: &[f64]) -> Result<[f64; 3]> {
    let n = model.dof();
    let na = model.actuators();
    let rest = sim::solve_static_equilibrium(model, &DVector::zeros(na), None)?;
    let q0 = sim::solve_static_equilibrium(model, &-DVector::from_column_slice(start), Some(&rest))?;
    let q_target = sim::solve_static_equilibrium(model, &-DVector::from_column_slice(target), Some(&rest))?;
    let x_d = kinematics::task_map(model, &q_target, sel)?;
    let gains = control::ClikGains::uniform(sel.dim(), n - na, 5.0, 5.0, 1e-6)?;
    let conv = control::precompute_reference(model, &gains, sel, &x_d, &q0, &Default::default())?;
    let task = (kinematics::task_map(model, &conv.q, sel)? - &x_d).norm();
    let eq = collocated::g_theta_u(model, &conv.q)?.norm();
    let u = control::feedforward(model, &conv.q)?;
    let balance = sim::static_residual(model, &conv.q, &u)?.norm();
    Ok([task, eq, balance])
}

fn control_suite() -> Result<Vec<Item>> {
    let model = RobotModel::default();
    // Squared planar task on tendons 3 and 4 from rest; the tip moves about 2 cm.
    let planar = model.with_tendons(&[3, 4])?;
    let tip_xz = TaskSelector::new(vec![
        TaskOutput { marker: model.length(), axis: Axis::X },
        TaskOutput { marker: model.length(), axis: Axis::Z },
    ]);
    let a = clik_fixed_point(&planar, &tip_xz, &[0.0, 0.0], &[0.3, 0.1])?;
    // Four tendons, four outputs. The straight pose is rank deficient for
    // this task, so the start is pre-tensioned.
    let sel = TaskSelector::tip_xyz_marker_y(model.length(), 0.8 * model.length());
    let b = clik_fixed_point(&model, &sel, &[0.3, 0.1, 0.2, 0.2], &[1.0, 0.6, 0.4, 0.8])?;
    let task_res = a[0].max(b[0]);
    let eq_res = a[1].max(b[1]);
    let balance = a[2].max(b[2]);

    let mut r = rng();
    let mut decouple = 0.0_f64;
    for _ in 0..5 {
        let q = physical_q(&mut r, &model, 3.0);
        let jac = control::clik_jacobians(&model, &q, &sel)?;
        let p = control::clik_projectors(&jac.task, &jac.equilibrium, 1e-6)?;
        let a = (&jac.task * &p.equilibrium).norm() / (jac.task.norm() * p.equilibrium.norm());
        let b = (&jac.equilibrium * &p.task).norm() / (jac.equilibrium.norm() * p.task.norm());
        decouple = decouple.max(a).max(b);
    }

    // Largest |theta_a - theta_a,d| over the last half second of the window.
    let spec = ScenarioSpec::parse(REGULATION, "regulation", std::path::Path::new("."))?;
    let run = scenarios::run_scenario(&spec, None)?;
    let res = &run.results[0];
    let theta_d = actuation::evaluate(&planar, &res.q_ref)?.coordinates;
    let end = res.start + res.window;
    let theta_err = if res.error.is_some() {
        f64::INFINITY
    } else {
        res.log
            .rows
            .iter()
            .filter(|r| r.t >= end - 0.5)
            .map(|r| (&r.theta_a - &theta_d).norm())
            .fold(0.0, f64::max)
    };
    Ok(vec![
        item("CLIK fixed point |x - x_d| (m)", task_res, 1e-6),
        item("CLIK fixed point |G_theta_u|", eq_res, 1e-6),
        item("static balance with u from the actuated rows", balance, 1e-6),
        item("projector decoupling (normalized)", decouple, 1e-8),
        item("|theta_a - theta_a,d| over 9.5..10 s (m)", theta_err, 1e-4),
    ])
}

const REGULATION: &str = r#"
name = "regulation"
kind = "custom"
tendons = [3, 4]
selector = [{ marker = 0.38, axis = "x" }, { marker = 0.38, axis = "z" }]

[sim]
dt = 1e-3
mocap_noise = 0.0
log_interval = 1e-2

[[target]]
tensions = [1.0, 1.2]
window = 10.0
mode = "precomputed"
"#;

pub const COILING: &str = include_str!("../../../configs/coiling.toml");
pub const PENDULUM: &str = include_str!("../../../configs/pendulum.toml");

fn first_phase_rms(m: &ScenarioMetrics) -> f64 {
    m.mean_rms(Some(Phase::First))
}

fn band_time(m: &ScenarioMetrics, phase: Phase, window: f64, band: usize) -> Vec<Option<f64>> {
    m.segments
        .iter()
        .filter(|s| s.phase == phase && s.window == window)
        .map(|s| if s.error.is_some() { None } else { s.metrics.bands[band].time_to_band })
        .collect()
}

/// Count of windows that miss the band, as an item value (0 passes).
fn misses(v: &[Option<f64>]) -> f64 {
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.iter().filter(|t| t.is_none()).count() as f64
}

fn behavioral() -> Result<Vec<Item>> {
    let dir = std::path::Path::new(".");
    let nominal = ScenarioSpec::parse(COILING, "coiling", dir)?;
    let band5 = nominal.bands.iter().position(|&b| b == 0.005);
    let band10 = nominal.bands.iter().position(|&b| b == 0.010);
    let (Some(band5), Some(band10)) = (band5, band10) else {
        return Err(crate::Error::Config("coiling config lacks the 5 and 10 mm bands".into()));
    };
    let windows = nominal.protocol.windows.clone().unwrap_or_else(|| vec![15.0, 5.0, 1.0]);
    let a = scenarios::run_scenario(&nominal, Some(Mode::TwoPhase))?.metrics;

    // Mismatch: first-phase windows only, precomputed against two-phase.
    let mut mismatched = nominal.clone();
    mismatched.sim.mismatch.stiffness = 0.10;
    let first_only = |spec: &ScenarioSpec, mode| -> Result<ScenarioMetrics> {
        let mut s = spec.clone();
        s.kind = scenarios::TaskKind::Custom;
        s.selector = Some(scenarios::prepare(spec, None)?.controllers.selector);
        for t in &mut s.targets {
            t.window = Some(windows[0]);
            t.mode = Some(mode);
        }
        Ok(scenarios::run_scenario(&s, None)?.metrics)
    };
    let pre = first_only(&mismatched, Mode::Precomputed)?;
    let two = first_only(&mismatched, Mode::TwoPhase)?;
    let (rms_pre, rms_two) = (first_phase_rms(&pre), first_phase_rms(&two));

    let pend = ScenarioSpec::parse(PENDULUM, "pendulum", dir)?;
    let c = scenarios::run_scenario(&pend, None)?.metrics;
    let strike = c.strike.as_ref();
    let closest = strike.map_or(f64::INFINITY, |s| s.closest_distance);
    let radius = strike.map_or(0.0, |s| s.radius);

    Ok(vec![
        item("(a) 15 s windows outside the 5 mm band", misses(&band_time(&a, Phase::First, windows[0], band5)), 0.5),
        item("(a) 1 s windows outside the 10 mm band", misses(&band_time(&a, Phase::Replay, windows[2], band10)), 0.5),
        item("(b) two-phase RMS minus precomputed RMS (m)", rms_two - rms_pre, 0.0),
        item("(b) two-phase windows outside the 10 mm band", misses(&band_time(&two, Phase::First, windows[0], band10)), 0.5),
        item("(c) closest tip approach before t_strike (m)", closest, radius),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn items_fail_on_nan_and_at_limit() {
        assert!(!item("x", f64::NAN, 1.0).passed());
        assert!(!item("x", 1.0, 1.0).passed());
        assert!(item("x", 0.5, 1.0).passed());
    }

    #[test]
    fn bundled_configs_parse() {
        let dir = std::path::Path::new(".");
        for text in [COILING, PENDULUM, REGULATION] {
            ScenarioSpec::parse(text, "bundled", dir).unwrap();
        }
    }

    #[test]
    fn lie_group_suite_passes() {
        let out = property_suites().remove(0).execute();
        assert!(out.passed(), "{}", out.summary());
    }
}
