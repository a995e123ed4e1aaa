//! Time integration, static equilibria and the nested closed loop
//! (CLIK outer loop, P-satI-D+ inner loop) on a possibly mismatched truth
//! model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actuation::{self, LengthMap};
use crate::collocated;
use crate::control::{
    clik_step, feedforward, precompute_reference, psat_id_plus, ClikGains, ConvergenceOptions,
    InputLimits, RegulatorGains, RegulatorState,
};
use crate::dynamics;
use crate::error::{Error, Result};
use crate::kinematics::{task_map, TaskSelector};
use crate::model::RobotModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Rk4,
    SemiImplicitEuler,
}

/// Relative parameter errors applied to the truth model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mismatch {
    #[serde(default)]
    pub stiffness: f64,
    #[serde(default)]
    pub density: f64,
    #[serde(default)]
    pub friction: f64,
}

impl Mismatch {
    pub fn is_none(&self) -> bool {
        self.stiffness == 0.0 && self.density == 0.0 && self.friction == 0.0
    }

    pub fn apply(&self, model: &RobotModel) -> Result<RobotModel> {
        if self.is_none() {
            return Ok(model.clone());
        }
        model.perturbed(self.stiffness, self.density, self.friction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Integration step (s).
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    /// Horizon of open-loop rollouts (s); closed-loop runs use the
    /// scenario windows.
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default)]
    pub mismatch: Mismatch,
    #[serde(default)]
    pub seed: u64,
    /// Half-width of the uniform mocap noise (m).
    #[serde(default = "default_noise")]
    pub mocap_noise: f64,
    /// Regulator rate (Hz).
    #[serde(default = "default_inner_rate")]
    pub inner_rate: f64,
    /// CLIK rate (Hz).
    #[serde(default = "default_clik_rate")]
    pub clik_rate: f64,
    /// Spacing of logged samples (s).
    #[serde(default = "default_log_interval")]
    pub log_interval: f64,
}

fn default_dt() -> f64 {
    2e-4
}
fn default_integrator() -> Integrator {
    Integrator::Rk4
}
fn default_duration() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    2e-4
}
fn default_inner_rate() -> f64 {
    1000.0
}
fn default_clik_rate() -> f64 {
    100.0
}
fn default_log_interval() -> f64 {
    2e-3
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            integrator: default_integrator(),
            duration: default_duration(),
            mismatch: Mismatch::default(),
            seed: 0,
            mocap_noise: default_noise(),
            inner_rate: default_inner_rate(),
            clik_rate: default_clik_rate(),
            log_interval: default_log_interval(),
        }
    }
}

/// Number of integration steps in `period`, which must be a whole multiple
/// of `dt`.
fn steps_in(period: f64, dt: f64, what: &str) -> Result<usize> {
    let k = (period / dt).round();
    if !(k >= 1.0) || ((k * dt - period).abs() > 1e-9 * period.max(dt)) {
        return Err(Error::Config(format!("{what} ({period} s) is not a multiple of dt ({dt} s)")));
    }
    Ok(k as usize)
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !(self.duration >= 0.0) {
            return Err(Error::Config("duration must be non-negative".into()));
        }
        for (name, v) in [
            ("stiffness", self.mismatch.stiffness),
            ("density", self.mismatch.density),
            ("friction", self.mismatch.friction),
        ] {
            if !(v.abs() < 0.5) {
                return Err(Error::Config(format!("{name} mismatch must be below 50%")));
            }
        }
        if !(self.mocap_noise >= 0.0 && self.mocap_noise.is_finite()) {
            return Err(Error::Config("mocap_noise must be non-negative".into()));
        }
        self.inner_steps()?;
        self.clik_steps()?;
        self.log_steps()?;
        Ok(())
    }

    pub fn inner_steps(&self) -> Result<usize> {
        steps_in(1.0 / self.inner_rate, self.dt, "inner loop period")
    }

    pub fn clik_steps(&self) -> Result<usize> {
        steps_in(1.0 / self.clik_rate, self.dt, "CLIK period")
    }

    pub fn log_steps(&self) -> Result<usize> {
        steps_in(self.log_interval, self.dt, "log interval")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl State {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { t: 0.0, q, qdot: DVector::zeros(n) }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

fn acceleration(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    if q.iter().chain(qdot.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite state".into()));
    }
    let terms = dynamics::rate_terms(model, q, qdot);
    let mut rhs = -terms.bias - model.damping() * qdot - model.stiffness() * q;
    if u.iter().any(|&v| v != 0.0) {
        rhs += actuation::actuation_matrix(model, q)? * u;
    }
    dynamics::solve_mass(terms.mass, &rhs)
}

/// One integration step under a constant input.
pub fn step(
    model: &RobotModel,
    state: &State,
    u: &DVector<f64>,
    dt: f64,
    integrator: Integrator,
) -> Result<State> {
    let diverged = |_| Error::Divergence { time: state.t };
    let (q, v) = (&state.q, &state.qdot);
    let next = match integrator {
        Integrator::Rk4 => {
            let a1 = acceleration(model, q, v, u).map_err(diverged)?;
            let q2 = q + v * (0.5 * dt);
            let v2 = v + &a1 * (0.5 * dt);
            let a2 = acceleration(model, &q2, &v2, u).map_err(diverged)?;
            let q3 = q + &v2 * (0.5 * dt);
            let v3 = v + &a2 * (0.5 * dt);
            let a3 = acceleration(model, &q3, &v3, u).map_err(diverged)?;
            let q4 = q + &v3 * dt;
            let v4 = v + &a3 * dt;
            let a4 = acceleration(model, &q4, &v4, u).map_err(diverged)?;
            State {
                t: state.t + dt,
                q: q + (v + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0),
                qdot: v + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0),
            }
        }
        Integrator::SemiImplicitEuler => {
            let a = acceleration(model, q, v, u).map_err(diverged)?;
            let qdot = v + a * dt;
            State { t: state.t + dt, q: q + &qdot * dt, qdot }
        }
    };
    if !next.is_finite() {
        return Err(Error::Divergence { time: next.t });
    }
    Ok(next)
}

/// Integrates `steps` steps under a constant input, returning every state
/// including the initial one.
pub fn rollout(
    model: &RobotModel,
    start: &State,
    u: &DVector<f64>,
    dt: f64,
    steps: usize,
    integrator: Integrator,
) -> Result<Vec<State>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(start.clone());
    for _ in 0..steps {
        let next = step(model, out.last().expect("non-empty"), u, dt, integrator)?;
        out.push(next);
    }
    Ok(out)
}

/// Kinetic, elastic and gravitational energy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Energy {
    pub kinetic: f64,
    pub elastic: f64,
    pub gravity: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.kinetic + self.elastic + self.gravity
    }
}

pub fn energy(model: &RobotModel, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<Energy> {
    Ok(Energy {
        kinetic: dynamics::kinetic_energy(model, q, qdot)?,
        elastic: dynamics::elastic_energy(model, q),
        gravity: dynamics::potential_energy(model, q)?,
    })
}

/// `K q + F(q) - A(q) u`.
pub fn static_residual(model: &RobotModel, q: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let mut r = model.stiffness() * q + dynamics::gravity_vector(model, q)?;
    if u.iter().any(|&v| v != 0.0) {
        r -= actuation::actuation_matrix(model, q)? * u;
    }
    Ok(r)
}

const STATIC_TOL: f64 = 1e-10;
const STATIC_MAX_ITER: usize = 100;

fn newton(model: &RobotModel, u: &DVector<f64>, q0: &DVector<f64>) -> Result<DVector<f64>> {
    let n = model.dof();
    let mut q = q0.clone();
    let mut r = static_residual(model, &q, u)?;
    for _ in 0..STATIC_MAX_ITER {
        if r.norm() < STATIC_TOL {
            return Ok(q);
        }
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            let h = 1e-6 * (1.0 + q[i].abs());
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let col = (static_residual(model, &qp, u)? - static_residual(model, &qm, u)?) / (2.0 * h);
            jac.set_column(i, &col);
        }
        let dq = jac
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| Error::Numerical("singular static Jacobian".into()))?;
        let mut alpha = 1.0;
        loop {
            let trial = &q + &dq * alpha;
            if let Ok(rt) = static_residual(model, &trial, u) {
                if rt.norm() < r.norm() || alpha < 1e-3 {
                    q = trial;
                    r = rt;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-4 {
                return Err(Error::NotConverged { iterations: STATIC_MAX_ITER, residual: r.norm() });
            }
        }
    }
    if r.norm() < STATIC_TOL {
        Ok(q)
    } else {
        Err(Error::NotConverged { iterations: STATIC_MAX_ITER, residual: r.norm() })
    }
}

/// Solves `K q + F(q) = A(q) u` by Newton's method from `guess` (the
/// straight rod when absent). When a direct solve fails the load is
/// applied in increments, each continuing from the previous solution.
pub fn solve_static_equilibrium(
    model: &RobotModel,
    u: &DVector<f64>,
    guess: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if u.len() != model.actuators() {
        return Err(Error::Config(format!("input needs {} entries", model.actuators())));
    }
    let q0 = guess.cloned().unwrap_or_else(|| DVector::zeros(model.dof()));
    match newton(model, u, &q0) {
        Ok(q) => Ok(q),
        Err(first) => {
            // Continuation from the unloaded equilibrium.
            let zero = DVector::zeros(model.actuators());
            let mut q = newton(model, &zero, &q0).map_err(|_| first)?;
            let stages = 16;
            for s in 1..=stages {
                let us = u * (s as f64 / stages as f64);
                q = newton(model, &us, &q)?;
            }
            Ok(q)
        }
    }
}

/// How the reference configuration of a segment is produced.
#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceMode {
    /// Offline CLIK on the internal model at the segment start.
    Precomputed,
    /// CLIK at its rate on measured task coordinates.
    Online,
    /// Precomputed reference, refined online after `online_after` seconds.
    TwoPhase { online_after: f64 },
    /// A stored reference configuration.
    Replay(DVector<f64>),
}

#[derive(Clone, Debug)]
pub struct Segment {
    pub x_d: DVector<f64>,
    pub window: f64,
    pub mode: ReferenceMode,
}

/// Source of the actuation-coordinate feedback of the inner loop.
#[derive(Clone, Debug)]
pub enum ThetaFeedback {
    /// `theta_a` of the internal model at the true configuration.
    Exact,
    /// Affine map applied to the true tendon lengths.
    MeasuredLengths(LengthMap),
}

#[derive(Clone, Debug)]
pub struct Controllers {
    pub regulator: RegulatorGains,
    pub limits: InputLimits,
    /// Gains of the offline (model-only) CLIK.
    pub clik: ClikGains,
    /// Gains of the online CLIK on measurements.
    pub clik_online: ClikGains,
    pub convergence: ConvergenceOptions,
    pub selector: TaskSelector,
    pub feedback: ThetaFeedback,
}

/// One logged sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub theta_a: DVector<f64>,
    pub lengths: DVector<f64>,
    /// Tension magnitudes `-u` (N).
    pub tension: DVector<f64>,
    /// True task coordinates.
    pub x: DVector<f64>,
    pub energy_kinetic: f64,
    pub energy_elastic: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
}

impl TrajectoryLog {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }
}

/// Outcome of one target window.
#[derive(Clone, Debug)]
pub struct SegmentResult {
    pub log: TrajectoryLog,
    pub x_d: DVector<f64>,
    pub start: f64,
    pub window: f64,
    /// Reference configuration at the end of the window.
    pub q_ref: DVector<f64>,
    /// Failure that truncated the window.
    pub error: Option<String>,
}

/// Closed-loop simulator carrying its state across target windows.
pub struct ClosedLoop {
    truth: RobotModel,
    internal: RobotModel,
    controllers: Controllers,
    config: SimConfig,
    state: State,
    q_ref: DVector<f64>,
    theta_d: DVector<f64>,
    feedforward: DVector<f64>,
    regulator: RegulatorState,
    command: DVector<f64>,
    rng: ChaCha8Rng,
}

impl ClosedLoop {
    /// Starts at rest at `q0` with reference `q_ref0`.
    pub fn new(
        truth: RobotModel,
        internal: RobotModel,
        controllers: Controllers,
        config: SimConfig,
        q0: DVector<f64>,
        q_ref0: DVector<f64>,
    ) -> Result<Self> {
        config.validate()?;
        controllers.limits.validate()?;
        controllers.selector.validate(&internal)?;
        let (n, na) = (internal.dof(), internal.actuators());
        if truth.dof() != n || truth.actuators() != na {
            return Err(Error::Config("truth and internal models differ in dimension".into()));
        }
        if controllers.regulator.actuators() != na || q0.len() != n || q_ref0.len() != n {
            return Err(Error::Config("controller or state dimension mismatch".into()));
        }
        let theta_d = actuation::actuation_coordinates(&internal, &q_ref0)?;
        let ff = feedforward(&internal, &q_ref0)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            truth,
            internal,
            controllers,
            config,
            state: State::at_rest(q0),
            q_ref: q_ref0,
            theta_d,
            feedforward: ff,
            regulator: RegulatorState::new(na),
            command: DVector::zeros(na),
            rng,
        })
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn reference(&self) -> &DVector<f64> {
        &self.q_ref
    }

    pub fn truth(&self) -> &RobotModel {
        &self.truth
    }

    pub fn internal(&self) -> &RobotModel {
        &self.internal
    }

    fn set_reference(&mut self, q_ref: DVector<f64>) -> Result<()> {
        self.theta_d = actuation::actuation_coordinates(&self.internal, &q_ref)?;
        self.feedforward = feedforward(&self.internal, &q_ref)?;
        self.q_ref = q_ref;
        Ok(())
    }

    fn measure(&mut self) -> Result<DVector<f64>> {
        let mut x = task_map(&self.truth, &self.state.q, &self.controllers.selector)?;
        let a = self.config.mocap_noise;
        if a > 0.0 {
            for v in x.iter_mut() {
                *v += self.rng.random_range(-a..=a);
            }
        }
        Ok(x)
    }

    fn log_row(&self) -> Result<LogRow> {
        let (q, qdot) = (&self.state.q, &self.state.qdot);
        let truth = actuation::evaluate(&self.truth, q)?;
        Ok(LogRow {
            t: self.state.t,
            q: q.clone(),
            qdot: qdot.clone(),
            theta_a: truth.coordinates,
            lengths: truth.lengths,
            tension: -&self.command,
            x: task_map(&self.truth, q, &self.controllers.selector)?,
            energy_kinetic: dynamics::kinetic_energy(&self.truth, q, qdot)?,
            energy_elastic: dynamics::elastic_energy(&self.truth, q),
        })
    }

    fn regulate(&mut self, dt: f64) -> Result<()> {
        let ev = actuation::evaluate(&self.internal, &self.state.q)?;
        let theta = match &self.controllers.feedback {
            ThetaFeedback::Exact => ev.coordinates,
            ThetaFeedback::MeasuredLengths(map) => {
                map.apply(&actuation::tendon_length(&self.truth, &self.state.q)?)
            }
        };
        let theta_dot = ev.matrix.tr_mul(&self.state.qdot);
        self.command = psat_id_plus(
            &self.controllers.regulator,
            &mut self.regulator,
            &self.theta_d,
            &theta,
            &theta_dot,
            &self.feedforward,
            &self.controllers.limits,
            dt,
        );
        Ok(())
    }

    fn prepare(&mut self, seg: &Segment) -> Result<()> {
        if seg.x_d.len() != self.controllers.selector.dim() {
            return Err(Error::Config("target dimension differs from the task selector".into()));
        }
        if !(seg.window > 0.0) {
            return Err(Error::Config("window must be positive".into()));
        }
        match &seg.mode {
            ReferenceMode::Precomputed | ReferenceMode::TwoPhase { .. } => {
                let conv = precompute_reference(
                    &self.internal,
                    &self.controllers.clik,
                    &self.controllers.selector,
                    &seg.x_d,
                    &self.q_ref,
                    &self.controllers.convergence,
                )?;
                self.set_reference(conv.q)
            }
            ReferenceMode::Replay(q) => {
                if q.len() != self.internal.dof() {
                    return Err(Error::Config("replayed reference has the wrong size".into()));
                }
                self.set_reference(q.clone())
            }
            ReferenceMode::Online => Ok(()),
        }
    }

    fn advance(&mut self, seg: &Segment, log: &mut TrajectoryLog) -> Result<()> {
        let dt = self.config.dt;
        let steps = steps_in(seg.window, dt, "window")?;
        let (k_inner, k_clik, k_log) =
            (self.config.inner_steps()?, self.config.clik_steps()?, self.config.log_steps()?);
        let clik_dt = k_clik as f64 * dt;
        for i in 0..=steps {
            let local = i as f64 * dt;
            let online = match seg.mode {
                ReferenceMode::Online => true,
                ReferenceMode::TwoPhase { online_after } => local >= online_after - 0.5 * dt,
                _ => false,
            };
            if online && i % k_clik == 0 && i < steps {
                let x = self.measure()?;
                let next = clik_step(
                    &self.internal,
                    &self.controllers.clik_online,
                    &self.controllers.selector,
                    &self.q_ref,
                    Some(&x),
                    &seg.x_d,
                    clik_dt,
                )?;
                self.set_reference(next.q)?;
            }
            if i % k_inner == 0 && i < steps {
                self.regulate(k_inner as f64 * dt)?;
            }
            if i % k_log == 0 || i == steps {
                log.rows.push(self.log_row()?);
            }
            if i < steps {
                let command = self.command.clone();
                self.state = step(&self.truth, &self.state, &command, dt, self.config.integrator)?;
            }
        }
        Ok(())
    }

    /// Runs one target window; failures truncate the log and are reported
    /// in the result.
    pub fn run_segment(&mut self, seg: &Segment) -> SegmentResult {
        let start = self.state.t;
        let mut log = TrajectoryLog::default();
        let outcome = self.prepare(seg).and_then(|_| self.advance(seg, &mut log));
        SegmentResult {
            log,
            x_d: seg.x_d.clone(),
            start,
            window: seg.window,
            q_ref: self.q_ref.clone(),
            error: outcome.err().map(|e| e.to_string()),
        }
    }
}

/// Runs the segments in order from the truth equilibrium under zero input,
/// stopping at the first failure.
pub fn run_closed_loop(
    truth: &RobotModel,
    internal: &RobotModel,
    controllers: &Controllers,
    config: &SimConfig,
    segments: &[Segment],
) -> Result<Vec<SegmentResult>> {
    let zero = DVector::zeros(internal.actuators());
    let q0 = solve_static_equilibrium(truth, &zero, None)?;
    let q_ref0 = solve_static_equilibrium(internal, &zero, None)?;
    let mut sim = ClosedLoop::new(
        truth.clone(),
        internal.clone(),
        controllers.clone(),
        config.clone(),
        q0,
        q_ref0,
    )?;
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        let res = sim.run_segment(seg);
        let failed = res.error.is_some();
        out.push(res);
        if failed {
            break;
        }
    }
    Ok(out)
}

/// `|G_theta_u|` at `q`, a convenience for equilibrium checks.
pub fn equilibrium_residual(model: &RobotModel, q: &DVector<f64>) -> Result<f64> {
    Ok(collocated::g_theta_u(model, q)?.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn weightless() -> RobotModel {
        let mut cfg = ModelConfig::default();
        cfg.geometry.gravity = [0.0; 3];
        RobotModel::new(cfg).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        let bad = SimConfig { dt: 3e-4, ..SimConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SimConfig { mismatch: Mismatch { stiffness: 0.6, ..Mismatch::default() }, ..SimConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rest_stays_at_rest() {
        let model = weightless();
        let s = State::at_rest(DVector::zeros(model.dof()));
        let u = DVector::zeros(4);
        let traj = rollout(&model, &s, &u, 1e-3, 50, Integrator::Rk4).unwrap();
        assert!(traj.iter().all(|st| st.q.norm() == 0.0 && st.qdot.norm() == 0.0));
    }

    #[test]
    fn unloaded_equilibrium_is_straight() {
        let model = weightless();
        let q = solve_static_equilibrium(&model, &DVector::zeros(4), None).unwrap();
        assert_eq!(q.norm(), 0.0);
    }

    #[test]
    fn pulling_straight_tendon_bends_toward_it() {
        let model = weightless();
        // Tendon 3 sits at 30 deg: d_y > 0, so its pull bends about -x.
        let u = DVector::from_vec(vec![0.0, 0.0, -0.5, 0.0]);
        let q = solve_static_equilibrium(&model, &u, None).unwrap();
        assert!(q[0] < 0.0);
        let r = static_residual(&model, &q, &u).unwrap();
        assert!(r.norm() < STATIC_TOL);
    }

    #[test]
    fn divergence_reported() {
        let model = weightless();
        let mut s = State::at_rest(DVector::zeros(model.dof()));
        s.qdot[0] = f64::NAN;
        let err = step(&model, &s, &DVector::zeros(4), 1e-3, Integrator::Rk4).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }
}
