//! Scenario configs for the coiling, triangle and pendulum-strike analogs,
//! their target protocols, task metrics and the CSV/JSON outputs.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actuation::LengthMap;
use crate::collocated;
use crate::control::{ClikGains, ConvergenceOptions, InputLimits, RegulatorGains};
use crate::error::{Error, Result};
use crate::kinematics::{self, Axis, TaskOutput, TaskSelector};
use crate::model::{ModelConfig, RobotModel};
use crate::sim::{
    solve_static_equilibrium, ClosedLoop, Controllers, ReferenceMode, Segment, SegmentResult,
    SimConfig, ThetaFeedback,
};

/// Version tag of the trajectory CSV and metrics JSON layout.
pub const FORMAT_VERSION: u32 = 1;

const CSV_MAGIC: &str = "# strainsim trajectory";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Coiling2d,
    Triangle4d,
    PendulumStrike,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Precomputed,
    Online,
    TwoPhase,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precomputed" => Ok(Mode::Precomputed),
            "online" => Ok(Mode::Online),
            "two_phase" => Ok(Mode::TwoPhase),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// A target given either directly in task coordinates or as the static
/// equilibrium of the internal model under the listed tension magnitudes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(default)]
    pub x_d: Option<Vec<f64>>,
    /// Tension magnitudes (N), one per active tendon.
    #[serde(default)]
    pub tensions: Option<Vec<f64>>,
    /// Window (s); required for `custom` scenarios.
    #[serde(default)]
    pub window: Option<f64>,
    #[serde(default)]
    pub mode: Option<Mode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainsSpec {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Offline CLIK task and equilibrium gains.
    pub clik_task: f64,
    pub clik_equilibrium: f64,
    /// Online CLIK gains.
    pub online_task: f64,
    pub online_equilibrium: f64,
    /// Damping of the pseudo-inverses.
    pub damping: f64,
    pub limits: InputLimits,
    pub convergence: ConvergenceOptions,
}

impl Default for GainsSpec {
    fn default() -> Self {
        Self {
            kp: 500.0,
            ki: 500.0,
            kd: 5.0,
            clik_task: 5.0,
            clik_equilibrium: 5.0,
            online_task: 2.0,
            online_equilibrium: 5.0,
            damping: 1e-6,
            limits: InputLimits::default(),
            convergence: ConvergenceOptions::default(),
        }
    }
}

/// Window schedule of the built-in task kinds. Unset fields take the
/// per-kind defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSpec {
    pub windows: Option<Vec<f64>>,
    pub repeats: Option<usize>,
    pub mode: Option<Mode>,
    /// Start of the online refinement within a two-phase window (s).
    pub online_after: Option<f64>,
}

/// Frame in which the pendulum pivot is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PivotFrame {
    /// The robot base frame.
    Base,
    /// A frame with z opposite to gravity, mapped to the base frame by a
    /// half turn about y.
    Upright,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumSpec {
    pub pivot: [f64; 3],
    pub frame: PivotFrame,
    pub cable_length: f64,
    pub release_deg: f64,
    /// Strike radius (m).
    pub radius: f64,
}

impl Default for PendulumSpec {
    fn default() -> Self {
        Self {
            pivot: [0.147, 0.156, 0.073],
            frame: PivotFrame::Upright,
            cable_length: 0.305,
            release_deg: 80.0,
            radius: 0.010,
        }
    }
}

impl PendulumSpec {
    pub fn pivot_in_base(&self) -> Vector3<f64> {
        let p = Vector3::from(self.pivot);
        match self.frame {
            PivotFrame::Base => p,
            PivotFrame::Upright => Vector3::new(-p.x, p.y, -p.z),
        }
    }
}

/// Axis-aligned box the targets must lie in, in task coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSpec {
    #[default]
    Exact,
    /// Affine map from measured tendon lengths, fitted on static equilibria
    /// of the internal model.
    TendonLengths,
}

fn default_bands() -> Vec<f64> {
    vec![0.005, 0.010, 0.030]
}

fn default_name() -> String {
    "scenario".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub kind: TaskKind,
    /// Model config file, relative to the scenario file.
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Active tendon ids; all tendons when absent.
    #[serde(default)]
    pub tendons: Option<Vec<usize>>,
    #[serde(default)]
    pub selector: Option<TaskSelector>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub gains: GainsSpec,
    #[serde(default)]
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub pendulum: PendulumSpec,
    #[serde(default)]
    pub workspace: Option<WorkspaceBox>,
    #[serde(default)]
    pub feedback: FeedbackSpec,
    #[serde(default = "default_bands")]
    pub bands: Vec<f64>,
    /// Tension magnitudes held before the first window; the run starts
    /// from the matching static equilibrium instead of rest.
    #[serde(default)]
    pub initial_tensions: Option<Vec<f64>>,
    #[serde(default, rename = "target")]
    pub targets: Vec<TargetSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ScenarioSpec {
    pub fn parse(text: &str, origin: &str, base_dir: &Path) -> Result<Self> {
        let mut spec: Self = toml::from_str(text)
            .map_err(|e| Error::Parse { path: origin.to_string(), message: e.to_string() })?;
        spec.base_dir = base_dir.to_path_buf();
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &dir)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.model.is_some() && self.model_file.is_some() {
            return Err(Error::Config("give either `model` or `model_file`, not both".into()));
        }
        if self.bands.is_empty() || self.bands.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::Config("bands must be positive".into()));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if t.x_d.is_some() == t.tensions.is_some() {
                return Err(Error::Config(format!("target {i}: give exactly one of `x_d`, `tensions`")));
            }
            if let Some(w) = t.window {
                if !(w > 0.0) {
                    return Err(Error::Config(format!("target {i}: window must be positive")));
                }
            }
            if let Some(u) = &t.tensions {
                if u.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(Error::Config(format!("target {i}: tensions are magnitudes >= 0")));
                }
            }
        }
        if let Some(u) = &self.initial_tensions {
            if u.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config("initial tensions are magnitudes >= 0".into()));
            }
        }
        if let Some(ws) = &self.protocol.windows {
            if ws.iter().any(|w| !(*w > 0.0)) {
                return Err(Error::Config("protocol windows must be positive".into()));
            }
        }
        match self.kind {
            TaskKind::Custom => {
                if self.targets.is_empty() {
                    return Err(Error::Config("custom scenario without targets".into()));
                }
                if self.targets.iter().any(|t| t.window.is_none()) {
                    return Err(Error::Config("custom targets need a `window`".into()));
                }
                if self.selector.is_none() {
                    return Err(Error::Config("custom scenario needs a `selector`".into()));
                }
            }
            TaskKind::Coiling2d | TaskKind::Triangle4d => {
                if self.targets.len() < 2 {
                    return Err(Error::Config("the protocol needs at least two targets".into()));
                }
                if self.protocol.windows.as_ref().is_some_and(|w| w.len() != 3) {
                    return Err(Error::Config("the protocol takes three windows".into()));
                }
            }
            TaskKind::PendulumStrike => {
                if !self.targets.is_empty() {
                    return Err(Error::Config("the strike pose is computed; remove the targets".into()));
                }
                let p = &self.pendulum;
                if !(p.cable_length > 0.0 && p.radius > 0.0) {
                    return Err(Error::Config("cable length and strike radius must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Sets a numeric parameter by dotted name, for sweeps.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "mismatch.stiffness" => self.sim.mismatch.stiffness = value,
            "mismatch.density" => self.sim.mismatch.density = value,
            "mismatch.friction" => self.sim.mismatch.friction = value,
            "sim.mocap_noise" => self.sim.mocap_noise = value,
            "sim.seed" | "seed" => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(Error::Config("seed must be a non-negative integer".into()));
                }
                self.sim.seed = value as u64;
            }
            "gains.kp" => self.gains.kp = value,
            "gains.ki" => self.gains.ki = value,
            "gains.kd" => self.gains.kd = value,
            "gains.online_task" => self.gains.online_task = value,
            "pendulum.release_deg" => self.pendulum.release_deg = value,
            _ => return Err(Error::Config(format!("parameter `{name}` cannot be swept"))),
        }
        self.validate()
    }

    fn model_config(&self) -> Result<ModelConfig> {
        match (&self.model, &self.model_file) {
            (Some(cfg), _) => Ok(cfg.clone()),
            (None, Some(file)) => ModelConfig::load(&self.base_dir.join(file)),
            (None, None) => Ok(ModelConfig::default()),
        }
    }
}

/// Parses `a:b:n` (n evenly spaced values) or `v1,v2,...`.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad range `{text}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = text.split(':').collect();
    match parts.len() {
        1 => text.split(',').map(num).collect(),
        3 => {
            let (a, b) = (num(parts[0])?, num(parts[1])?);
            let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
            match n {
                0 => Err(bad()),
                1 => Ok(vec![a]),
                _ => Ok((0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()),
            }
        }
        _ => Err(bad()),
    }
}

/// Strike pose of a point pendulum released from rest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumStrike {
    /// Lowest point of the swing, where the speed peaks.
    pub pose: Vector3<f64>,
    /// Time from release to the lowest point (s).
    pub time: f64,
    /// Speed at the lowest point (m/s).
    pub speed: f64,
}

/// Integrates `th'' = -(g/l) sin th` from rest at `release` until the
/// cable is vertical. A zero release returns the rest pose at `t = 0`.
pub fn pendulum_target(
    pivot: &Vector3<f64>,
    cable_length: f64,
    release: f64,
    gravity: &Vector3<f64>,
) -> Result<PendulumStrike> {
    let g = gravity.norm();
    if !(cable_length > 0.0 && g > 0.0) {
        return Err(Error::Config("pendulum needs a positive cable length and gravity".into()));
    }
    if !(0.0..=PI / 2.0).contains(&release) {
        return Err(Error::Domain { x: release, limit: PI / 2.0 });
    }
    let pose = pivot + gravity / g * cable_length;
    if release == 0.0 {
        return Ok(PendulumStrike { pose, time: 0.0, speed: 0.0 });
    }
    let w2 = g / cable_length;
    let rhs = |s: [f64; 2]| [s[1], -w2 * s[0].sin()];
    let rk4 = |s: [f64; 2], h: f64| {
        let k1 = rhs(s);
        let k2 = rhs([s[0] + 0.5 * h * k1[0], s[1] + 0.5 * h * k1[1]]);
        let k3 = rhs([s[0] + 0.5 * h * k2[0], s[1] + 0.5 * h * k2[1]]);
        let k4 = rhs([s[0] + h * k3[0], s[1] + h * k3[1]]);
        [
            s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]
    };
    let h = 1e-4 / w2.sqrt();
    let (mut t, mut s) = (0.0, [release, 0.0]);
    loop {
        let next = rk4(s, h);
        if next[0] <= 0.0 {
            break;
        }
        s = next;
        t += h;
        if t > 1e3 / w2.sqrt() {
            return Err(Error::NotConverged { iterations: (t / h) as usize, residual: s[0] });
        }
    }
    // Bisect the final step for the zero crossing.
    let (mut lo, mut hi) = (0.0, h);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if rk4(s, mid)[0] > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let end = rk4(s, hi);
    Ok(PendulumStrike { pose, time: t + hi, speed: end[1].abs() * cable_length })
}

/// Reach-and-remain entry into one band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMetric {
    /// Band radius (m), on the largest coordinate error.
    pub radius: f64,
    /// Time after which the error stays inside the band (s); absent when
    /// the window ends outside it.
    pub time_to_band: Option<f64>,
    /// Displacement over time to band (m/s); zero when the band holds from
    /// the start.
    pub equivalent_velocity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Distance from the start position to the target (m).
    pub displacement: f64,
    pub bands: Vec<BandMetric>,
    /// RMS of the error norm over the last fifth of the window (m).
    pub rms_error: f64,
    pub final_error: f64,
    /// Peak speed of the task output (m/s).
    pub peak_speed: f64,
}

/// Metrics of one window from its samples. Times are taken relative to the
/// first sample.
pub fn compute_metrics(times: &[f64], xs: &[DVector<f64>], x_d: &DVector<f64>, bands: &[f64]) -> TaskMetrics {
    if times.is_empty() {
        return TaskMetrics {
            displacement: 0.0,
            bands: bands
                .iter()
                .map(|&radius| BandMetric { radius, time_to_band: None, equivalent_velocity: None })
                .collect(),
            rms_error: f64::NAN,
            final_error: f64::NAN,
            peak_speed: 0.0,
        };
    }
    let t0 = times[0];
    let rel: Vec<f64> = times.iter().map(|t| t - t0).collect();
    let errs: Vec<f64> = xs.iter().map(|x| (x - x_d).amax()).collect();
    let displacement = (x_d - &xs[0]).norm();
    let bands = bands
        .iter()
        .map(|&radius| {
            let time_to_band = band_entry(&rel, &errs, radius);
            let equivalent_velocity = time_to_band.map(|t| if t > 0.0 { displacement / t } else { 0.0 });
            BandMetric { radius, time_to_band, equivalent_velocity }
        })
        .collect();
    let end = *rel.last().unwrap();
    let cut = 0.8 * end;
    let tail: Vec<f64> = rel
        .iter()
        .zip(xs)
        .filter(|(t, _)| **t >= cut)
        .map(|(_, x)| (x - x_d).norm_squared())
        .collect();
    let rms_error = (tail.iter().sum::<f64>() / tail.len() as f64).sqrt();
    let final_error = (xs.last().unwrap() - x_d).norm();
    let mut peak_speed = 0.0_f64;
    if xs.len() == 2 && rel[1] > 0.0 {
        peak_speed = (&xs[1] - &xs[0]).norm() / rel[1];
    }
    for i in 1..xs.len().saturating_sub(1) {
        let dt = rel[i + 1] - rel[i - 1];
        if dt > 0.0 {
            peak_speed = peak_speed.max((&xs[i + 1] - &xs[i - 1]).norm() / dt);
        }
    }
    TaskMetrics { displacement, bands, rms_error, final_error, peak_speed }
}

/// Time after the last exit from `radius`, interpolated linearly between
/// samples.
fn band_entry(t: &[f64], e: &[f64], radius: f64) -> Option<f64> {
    match e.iter().rposition(|&v| v > radius) {
        None => Some(0.0),
        Some(i) if i + 1 == e.len() => None,
        Some(i) => {
            let s = (e[i] - radius) / (e[i] - e[i + 1]);
            Some(t[i] + s * (t[i + 1] - t[i]))
        }
    }
}

/// Where a window sits in the protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Reference computed in this window.
    First,
    /// Reference replayed from the first phase.
    Replay,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedSegment {
    pub target: usize,
    pub window: f64,
    pub phase: Phase,
    pub mode: Mode,
}

/// Inputs of a run after resolving the config.
#[derive(Clone)]
pub struct Prepared {
    pub internal: RobotModel,
    pub truth: RobotModel,
    pub controllers: Controllers,
    pub targets: Vec<DVector<f64>>,
    pub plan: Vec<PlannedSegment>,
    pub strike: Option<PendulumStrike>,
    pub online_after: f64,
    pub q0: DVector<f64>,
    pub q_ref0: DVector<f64>,
}

fn default_selector(kind: TaskKind, length: f64) -> TaskSelector {
    match kind {
        TaskKind::Coiling2d => TaskSelector::new(vec![
            TaskOutput { marker: length, axis: Axis::X },
            TaskOutput { marker: length, axis: Axis::Z },
        ]),
        TaskKind::Triangle4d => TaskSelector::tip_xyz_marker_y(length, 0.8 * length),
        _ => TaskSelector::tip_xyz(length),
    }
}

fn tension_samples(na: usize) -> Vec<DVector<f64>> {
    let mut out = vec![DVector::zeros(na)];
    for k in 0..na {
        for level in [1.5, 3.0] {
            let mut u = DVector::zeros(na);
            u[k] = -level;
            out.push(u);
        }
    }
    out.push(DVector::from_element(na, -1.0));
    out
}

pub fn prepare(spec: &ScenarioSpec, mode_override: Option<Mode>) -> Result<Prepared> {
    spec.validate()?;
    let mut internal = RobotModel::new(spec.model_config()?)?;
    if let Some(ids) = &spec.tendons {
        internal = internal.with_tendons(ids)?;
    }
    let truth = spec.sim.mismatch.apply(&internal)?;
    let na = internal.actuators();
    let nu = internal.dof() - na;
    let selector = spec.selector.clone().unwrap_or_else(|| default_selector(spec.kind, internal.length()));
    selector.validate(&internal)?;
    let m = selector.dim();
    let g = &spec.gains;
    let zero = DVector::zeros(na);
    let rest = solve_static_equilibrium(&internal, &zero, None)?;
    let (q_ref0, q0) = match &spec.initial_tensions {
        None => {
            let q0 = solve_static_equilibrium(&truth, &zero, Some(&rest))?;
            (rest, q0)
        }
        Some(t) => {
            if t.len() != na {
                return Err(Error::Config(format!("{} initial tensions for {na} tendons", t.len())));
            }
            let u0 = -DVector::from_column_slice(t);
            let q_ref0 = solve_static_equilibrium(&internal, &u0, Some(&rest))?;
            let q0 = solve_static_equilibrium(&truth, &u0, Some(&q_ref0))?;
            (q_ref0, q0)
        }
    };

    let feedback = match spec.feedback {
        FeedbackSpec::Exact => ThetaFeedback::Exact,
        FeedbackSpec::TendonLengths => {
            let samples = tension_samples(na)
                .iter()
                .map(|u| solve_static_equilibrium(&internal, u, Some(&q_ref0)))
                .collect::<Result<Vec<_>>>()?;
            ThetaFeedback::MeasuredLengths(LengthMap::fit(&internal, &samples)?)
        }
    };
    let controllers = Controllers {
        regulator: RegulatorGains::uniform(na, g.kp, g.ki, g.kd)?,
        limits: g.limits,
        clik: ClikGains::uniform(m, nu, g.clik_task, g.clik_equilibrium, g.damping)?,
        clik_online: ClikGains::uniform(m, nu, g.online_task, g.online_equilibrium, g.damping)?,
        convergence: g.convergence,
        selector: selector.clone(),
        feedback,
    };

    let mut strike = None;
    let mut targets = Vec::with_capacity(spec.targets.len());
    if spec.kind == TaskKind::PendulumStrike {
        let p = &spec.pendulum;
        let s = pendulum_target(
            &p.pivot_in_base(),
            p.cable_length,
            p.release_deg.to_radians(),
            &internal.geometry().gravity_vector(),
        )?;
        if m != 3 {
            return Err(Error::Config("the strike task needs a three-output selector".into()));
        }
        targets.push(DVector::from_column_slice(s.pose.as_slice()));
        strike = Some(s);
    }
    for (i, t) in spec.targets.iter().enumerate() {
        let x = match (&t.x_d, &t.tensions) {
            (Some(x), _) => DVector::from_column_slice(x),
            (None, Some(u)) => {
                if u.len() != na {
                    return Err(Error::Config(format!("target {i}: {} tensions for {na} tendons", u.len())));
                }
                let u = -DVector::from_column_slice(u);
                let q = solve_static_equilibrium(&internal, &u, Some(&q_ref0))?;
                kinematics::task_map(&internal, &q, &selector)?
            }
            (None, None) => unreachable!("validated"),
        };
        if x.len() != m {
            return Err(Error::Config(format!("target {i} has {} coordinates, the task has {m}", x.len())));
        }
        targets.push(x);
    }
    let (lo, hi) = match &spec.workspace {
        Some(b) if b.min.len() == m && b.max.len() == m => (b.min.clone(), b.max.clone()),
        Some(_) => return Err(Error::Config("workspace box dimension differs from the task".into())),
        None => (vec![-internal.length(); m], vec![internal.length(); m]),
    };
    for (i, x) in targets.iter().enumerate() {
        if x.iter().zip(lo.iter().zip(&hi)).any(|(v, (a, b))| !(v >= a && v <= b)) {
            return Err(Error::Config(format!("target {i} {:?} lies outside the workspace box", x.as_slice())));
        }
    }

    let pick = |t: &TargetSpec, default: Mode| mode_override.or(t.mode).or(spec.protocol.mode).unwrap_or(default);
    let n = targets.len();
    let mut plan = Vec::new();
    let schedule = |first_window: f64, first_mode: Mode, replays: &[(usize, f64)], plan: &mut Vec<PlannedSegment>| {
        for (i, t) in spec.targets.iter().enumerate() {
            plan.push(PlannedSegment { target: i, window: first_window, phase: Phase::First, mode: pick(t, first_mode) });
        }
        for &(i, w) in replays {
            plan.push(PlannedSegment { target: i, window: w, phase: Phase::Replay, mode: Mode::Precomputed });
        }
    };
    match spec.kind {
        TaskKind::Custom => {
            for (i, t) in spec.targets.iter().enumerate() {
                plan.push(PlannedSegment {
                    target: i,
                    window: t.window.unwrap_or(0.0),
                    phase: Phase::First,
                    mode: pick(t, Mode::Precomputed),
                });
            }
        }
        TaskKind::Coiling2d => {
            let w = spec.protocol.windows.clone().unwrap_or_else(|| vec![15.0, 5.0, 1.0]);
            let mut replays: Vec<(usize, f64)> = (0..n - 1).rev().map(|i| (i, w[1])).collect();
            replays.extend((1..n).map(|i| (i, w[2])));
            schedule(w[0], Mode::TwoPhase, &replays, &mut plan);
        }
        TaskKind::Triangle4d => {
            let w = spec.protocol.windows.clone().unwrap_or_else(|| vec![25.0, 5.0, 1.0]);
            let reps = spec.protocol.repeats.unwrap_or(3);
            let mut replays = Vec::new();
            for win in [w[1], w[2]] {
                for _ in 0..reps {
                    replays.extend((0..n).map(|i| (i, win)));
                }
            }
            // The online flow drives the weak fourth direction of this
            // task into saturation, so the first phase is precomputed.
            schedule(w[0], Mode::Precomputed, &replays, &mut plan);
        }
        TaskKind::PendulumStrike => {
            let w = spec.protocol.windows.as_ref().and_then(|w| w.first().copied()).unwrap_or(1.0);
            let mode = mode_override.or(spec.protocol.mode).unwrap_or(Mode::Precomputed);
            plan.push(PlannedSegment { target: 0, window: w, phase: Phase::First, mode });
        }
    }
    Ok(Prepared {
        internal,
        truth,
        controllers,
        targets,
        plan,
        strike,
        online_after: spec.protocol.online_after.unwrap_or(5.0),
        q0,
        q_ref0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub index: usize,
    pub target: usize,
    pub phase: Phase,
    pub mode: Mode,
    pub window: f64,
    pub start: f64,
    pub x_d: Vec<f64>,
    /// Static input balancing the final reference (N, signed).
    pub feedforward: Vec<f64>,
    /// Whether that input lies within the tendon limits.
    pub admissible: bool,
    pub error: Option<String>,
    pub file: String,
    pub metrics: TaskMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrikeReport {
    pub pose: Vec<f64>,
    pub t_strike: f64,
    pub pendulum_speed: f64,
    pub radius: f64,
    /// Smallest tip distance to the pose up to `t_strike` (m).
    pub closest_distance: f64,
    pub closest_time: f64,
    /// First time within `radius`, if any, up to `t_strike`.
    pub entry_time: Option<f64>,
    pub reached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub version: u32,
    pub name: String,
    pub kind: TaskKind,
    pub seed: u64,
    pub bands: Vec<f64>,
    pub segments: Vec<SegmentReport>,
    pub strike: Option<StrikeReport>,
    /// All windows ran to the end with admissible references.
    pub completed: bool,
}

impl ScenarioMetrics {
    /// Mean over windows of the steady-state RMS error.
    pub fn mean_rms(&self, phase: Option<Phase>) -> f64 {
        let v: Vec<f64> = self
            .segments
            .iter()
            .filter(|s| phase.is_none_or(|p| s.phase == p))
            .map(|s| s.metrics.rms_error)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub struct ScenarioRun {
    pub results: Vec<SegmentResult>,
    pub metrics: ScenarioMetrics,
    pub selector: TaskSelector,
}

fn strike_report(strike: &PendulumStrike, radius: f64, res: &SegmentResult) -> StrikeReport {
    let mut closest = (f64::INFINITY, 0.0);
    let mut entry = None;
    for row in &res.log.rows {
        let t = row.t - res.start;
        if t > strike.time + 1e-12 {
            break;
        }
        let d = (row.x.fixed_rows::<3>(0) - strike.pose).norm();
        if d < closest.0 {
            closest = (d, t);
        }
        if entry.is_none() && d <= radius {
            entry = Some(t);
        }
    }
    StrikeReport {
        pose: strike.pose.as_slice().to_vec(),
        t_strike: strike.time,
        pendulum_speed: strike.speed,
        radius,
        closest_distance: closest.0,
        closest_time: closest.1,
        entry_time: entry,
        reached: entry.is_some(),
    }
}

/// Runs the protocol of `spec`; window failures end the run and are
/// reported in the metrics.
pub fn run_scenario(spec: &ScenarioSpec, mode_override: Option<Mode>) -> Result<ScenarioRun> {
    let prep = prepare(spec, mode_override)?;
    let mut sim = ClosedLoop::new(
        prep.truth.clone(),
        prep.internal.clone(),
        prep.controllers.clone(),
        spec.sim.clone(),
        prep.q0.clone(),
        prep.q_ref0.clone(),
    )?;
    let limits = prep.controllers.limits;
    let mut stored: Vec<Option<DVector<f64>>> = vec![None; prep.targets.len()];
    let mut results = Vec::new();
    let mut reports = Vec::new();
    let mut completed = true;
    for (index, plan) in prep.plan.iter().enumerate() {
        let mode = match (plan.phase, plan.mode) {
            (Phase::Replay, _) => match &stored[plan.target] {
                Some(q) => ReferenceMode::Replay(q.clone()),
                None => return Err(Error::Config(format!("target {} replayed before it ran", plan.target))),
            },
            (Phase::First, Mode::Precomputed) => ReferenceMode::Precomputed,
            (Phase::First, Mode::Online) => ReferenceMode::Online,
            (Phase::First, Mode::TwoPhase) => ReferenceMode::TwoPhase { online_after: prep.online_after },
        };
        let seg = Segment { x_d: prep.targets[plan.target].clone(), window: plan.window, mode };
        let res = sim.run_segment(&seg);
        if plan.phase == Phase::First {
            stored[plan.target] = Some(res.q_ref.clone());
        }
        let ff = collocated::static_input(&prep.internal, &res.q_ref)?;
        let admissible = ff.iter().all(|&u| u >= limits.min - 1e-9 && u <= limits.max + 1e-9);
        let times = res.log.times();
        let xs: Vec<DVector<f64>> = res.log.rows.iter().map(|r| r.x.clone()).collect();
        reports.push(SegmentReport {
            index,
            target: plan.target,
            phase: plan.phase,
            mode: plan.mode,
            window: plan.window,
            start: res.start,
            x_d: res.x_d.as_slice().to_vec(),
            feedforward: ff.as_slice().to_vec(),
            admissible,
            error: res.error.clone(),
            file: trajectory_file_name(index),
            metrics: compute_metrics(&times, &xs, &res.x_d, &spec.bands),
        });
        let failed = res.error.is_some();
        completed &= !failed && admissible;
        results.push(res);
        if failed {
            break;
        }
    }
    let strike = match (&prep.strike, results.first()) {
        (Some(s), Some(res)) => Some(strike_report(s, spec.pendulum.radius, res)),
        _ => None,
    };
    let metrics = ScenarioMetrics {
        version: FORMAT_VERSION,
        name: spec.name.clone(),
        kind: spec.kind,
        seed: spec.sim.seed,
        bands: spec.bands.clone(),
        segments: reports,
        strike,
        completed,
    };
    Ok(ScenarioRun { results, metrics, selector: prep.controllers.selector })
}

pub fn trajectory_file_name(index: usize) -> String {
    format!("trajectory_{index:03}.csv")
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|&x| fmt(x)).collect::<Vec<_>>().join(";")
}

/// CSV of one window: a commented header carrying the format version and
/// the window data, then one row per logged sample.
pub fn trajectory_csv(report: &SegmentReport, res: &SegmentResult) -> String {
    let mut out = String::new();
    let (n, na, m) = match res.log.rows.first() {
        Some(r) => (r.q.len(), r.theta_a.len(), r.x.len()),
        None => (0, 0, report.x_d.len()),
    };
    let _ = writeln!(out, "{CSV_MAGIC} v{FORMAT_VERSION}");
    let _ = writeln!(out, "# segment={} target={} window={}", report.index, report.target, fmt(report.window));
    let _ = writeln!(out, "# start={}", fmt(report.start));
    let _ = writeln!(out, "# x_d={}", join(&report.x_d));
    let _ = writeln!(out, "# u is the signed tendon input (N), pulling < 0");
    let mut head = vec!["t".to_string()];
    for (name, k) in [("q", n), ("qdot", n), ("theta_a", na), ("L_c", na), ("u", na), ("x", m)] {
        head.extend((0..k).map(|i| format!("{name}{i}")));
    }
    head.push("energy_kinetic".into());
    head.push("energy_elastic".into());
    let _ = writeln!(out, "{}", head.join(","));
    for r in &res.log.rows {
        let mut cells = vec![fmt(r.t)];
        for v in [&r.q, &r.qdot, &r.theta_a, &r.lengths] {
            cells.extend(v.iter().map(|&x| fmt(x)));
        }
        cells.extend(r.tension.iter().map(|&x| fmt(-x)));
        cells.extend(r.x.iter().map(|&x| fmt(x)));
        cells.push(fmt(r.energy_kinetic));
        cells.push(fmt(r.energy_elastic));
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Columns of a trajectory CSV, read back for post-processing.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTable {
    pub version: u32,
    pub start: f64,
    pub window: f64,
    pub x_d: DVector<f64>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    /// Task coordinates `x0..x{m-1}` per row.
    pub fn task(&self) -> Vec<DVector<f64>> {
        let idx: Vec<usize> = (0..)
            .map_while(|i| self.columns.iter().position(|c| *c == format!("x{i}")))
            .collect();
        self.rows.iter().map(|r| DVector::from_iterator(idx.len(), idx.iter().map(|&k| r[k]))).collect()
    }
}

pub fn read_trajectory_csv(text: &str, origin: &str) -> Result<TrajectoryTable> {
    let err = |line: usize, message: String| Error::Parse { path: format!("{origin}:{line}"), message };
    let mut lines = text.lines().enumerate();
    let version = match lines.next() {
        Some((_, l)) if l.starts_with(CSV_MAGIC) => l[CSV_MAGIC.len()..]
            .trim()
            .strip_prefix('v')
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| err(1, "bad version tag".into()))?,
        _ => return Err(err(1, "missing trajectory header".into())),
    };
    if version != FORMAT_VERSION {
        return Err(err(1, format!("unsupported version {version}")));
    }
    let num = |line: usize, s: &str| s.trim().parse::<f64>().map_err(|_| err(line, format!("bad number `{s}`")));
    let (mut start, mut window, mut x_d) = (None, None, None);
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if let Some(meta) = line.strip_prefix('#') {
            for item in meta.split_whitespace() {
                match item.split_once('=') {
                    Some(("start", v)) => start = Some(num(ln, v)?),
                    Some(("window", v)) => window = Some(num(ln, v)?),
                    Some(("x_d", v)) => {
                        x_d = Some(v.split(';').map(|s| num(ln, s)).collect::<Result<Vec<_>>>()?)
                    }
                    _ => {}
                }
            }
        } else if columns.is_empty() {
            columns = line.split(',').map(str::to_string).collect();
        } else if !line.is_empty() {
            let row = line.split(',').map(|s| num(ln, s)).collect::<Result<Vec<_>>>()?;
            if row.len() != columns.len() {
                return Err(err(ln, format!("{} cells for {} columns", row.len(), columns.len())));
            }
            rows.push(row);
        }
    }
    let missing = |what: &str| err(0, format!("missing `{what}`"));
    Ok(TrajectoryTable {
        version,
        start: start.ok_or_else(|| missing("start"))?,
        window: window.ok_or_else(|| missing("window"))?,
        x_d: DVector::from_vec(x_d.ok_or_else(|| missing("x_d"))?),
        columns,
        rows,
    })
}

/// Recomputes the window metrics from a trajectory CSV.
pub fn metrics_from_csv(text: &str, bands: &[f64]) -> Result<TaskMetrics> {
    let table = read_trajectory_csv(text, "<csv>")?;
    let t = table.column("t").ok_or_else(|| Error::Parse { path: "<csv>".into(), message: "no `t` column".into() })?;
    Ok(compute_metrics(&t, &table.task(), &table.x_d, bands))
}

/// Writes one CSV per window and `metrics.json` into `dir`.
pub fn write_outputs(run: &ScenarioRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (report, res) in run.metrics.segments.iter().zip(&run.results) {
        fs::write(dir.join(&report.file), trajectory_csv(report, res))?;
    }
    let json = serde_json::to_string_pretty(&run.metrics).map_err(|e| Error::Numerical(e.to_string()))?;
    fs::write(dir.join("metrics.json"), json + "\n")?;
    Ok(())
}

/// One static equilibrium of the workspace cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkspacePoint {
    /// Tension magnitudes (N).
    pub tensions: DVector<f64>,
    pub tip: Vector3<f64>,
}

/// Tip positions of static equilibria under uniformly drawn tensions in
/// the input limits. Points whose equilibrium solve fails are skipped.
pub fn sample_workspace(spec: &ScenarioSpec, samples: usize) -> Result<Vec<WorkspacePoint>> {
    spec.validate()?;
    let mut model = RobotModel::new(spec.model_config()?)?;
    if let Some(ids) = &spec.tendons {
        model = model.with_tendons(ids)?;
    }
    let na = model.actuators();
    let lim = spec.gains.limits;
    lim.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sim.seed);
    let draws: Vec<DVector<f64>> = (0..samples)
        .map(|_| DVector::from_fn(na, |_, _| -rng.random_range(lim.min..=lim.max)))
        .collect();
    let rest = solve_static_equilibrium(&model, &DVector::zeros(na), None)?;
    let points = draws
        .par_iter()
        .filter_map(|t| {
            let q = solve_static_equilibrium(&model, &-t, Some(&rest)).ok()?;
            let tip = kinematics::forward_kinematics(&model, &q, model.length()).ok()?.position;
            Some(WorkspacePoint { tensions: t.clone(), tip })
        })
        .collect();
    Ok(points)
}

pub fn workspace_csv(points: &[WorkspacePoint]) -> String {
    let na = points.first().map_or(0, |p| p.tensions.len());
    let mut out = format!("{CSV_MAGIC} v{FORMAT_VERSION} workspace\n");
    let mut head: Vec<String> = (0..na).map(|i| format!("tension{i}")).collect();
    head.extend(["tip_x", "tip_y", "tip_z"].map(String::from));
    let _ = writeln!(out, "{}", head.join(","));
    for p in points {
        let cells: Vec<String> = p.tensions.iter().chain(p.tip.iter()).map(|&v| fmt(v)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, dt: f64, f: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<DVector<f64>>) {
        let t: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let x = t.iter().map(|&s| DVector::from_vec(vec![f(s), 0.0])).collect();
        (t, x)
    }

    /// Complete elliptic integral of the first kind by the AGM.
    fn ellip_k(k: f64) -> f64 {
        let (mut a, mut b) = (1.0_f64, (1.0 - k * k).sqrt());
        while (a - b).abs() > 1e-15 {
            (a, b) = (0.5 * (a + b), (a * b).sqrt());
        }
        PI / (2.0 * a)
    }

    #[test]
    fn constant_error_bands() {
        let (t, x) = ramp(101, 0.01, |_| 0.02);
        let m = compute_metrics(&t, &x, &DVector::zeros(2), &default_bands());
        assert_eq!(m.bands[2].time_to_band, Some(0.0));
        assert_eq!(m.bands[2].equivalent_velocity, Some(0.0));
        assert_eq!(m.bands[1].time_to_band, None);
        assert_eq!(m.bands[0].time_to_band, None);
        assert!((m.rms_error - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rms_of_constant_error() {
        let (t, x) = ramp(50, 0.1, |_| 0.67e-3);
        let m = compute_metrics(&t, &x, &DVector::zeros(2), &[0.01]);
        assert!((m.rms_error - 0.67e-3).abs() < 1e-15);
    }

    #[test]
    fn exponential_decay_crossings() {
        let (t, x) = ramp(10_001, 1e-3, |s| 0.05 * (-s).exp());
        let m = compute_metrics(&t, &x, &DVector::zeros(2), &default_bands());
        for b in &m.bands {
            let exact = (0.05 / b.radius).ln();
            assert!((b.time_to_band.unwrap() - exact).abs() < 1e-6, "{b:?}");
            let v = b.equivalent_velocity.unwrap();
            assert!((v - 0.05 / b.time_to_band.unwrap()).abs() < 1e-15);
        }
        let times: Vec<f64> = m.bands.iter().map(|b| b.time_to_band.unwrap()).collect();
        assert!(times[0] >= times[1] && times[1] >= times[2]);
        // First interior sample, t = dt.
        assert!((m.peak_speed - 0.05 * (-1e-3f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn zero_displacement_target() {
        let (t, x) = ramp(20, 0.01, |_| 0.1);
        let target = x[0].clone();
        let m = compute_metrics(&t, &x, &target, &default_bands());
        assert_eq!(m.displacement, 0.0);
        for b in m.bands {
            assert_eq!(b.time_to_band, Some(0.0));
            assert_eq!(b.equivalent_velocity, Some(0.0));
        }
    }

    #[test]
    fn pendulum_lowest_point_speed() {
        let g = Vector3::new(0.0, 0.0, 9.81);
        let pivot = Vector3::new(0.1, 0.2, -0.1);
        let l = 0.305;
        let s = pendulum_target(&pivot, l, 80f64.to_radians(), &g).unwrap();
        let v = (2.0 * 9.81 * l * (1.0 - 80f64.to_radians().cos())).sqrt();
        assert!((v - 2.22).abs() < 5e-3);
        assert!((s.speed - v).abs() < 1e-8, "{} vs {v}", s.speed);
        assert!((s.pose - Vector3::new(0.1, 0.2, 0.205)).norm() < 1e-15);
    }

    #[test]
    fn pendulum_quarter_period() {
        let g = Vector3::new(0.0, 0.0, 9.81);
        for deg in [5.0, 30.0, 80.0, 90.0_f64] {
            let a = deg.to_radians();
            let s = pendulum_target(&Vector3::zeros(), 0.305, a, &g).unwrap();
            let exact = (0.305 / 9.81_f64).sqrt() * ellip_k((a / 2.0).sin());
            assert!(((s.time - exact) / exact).abs() < 1e-3 * 1e-3, "{deg}: {} vs {exact}", s.time);
        }
    }

    #[test]
    fn pendulum_at_rest() {
        let g = Vector3::new(0.0, 0.0, 9.81);
        let s = pendulum_target(&Vector3::new(0.0, 0.0, 0.1), 0.3, 0.0, &g).unwrap();
        assert_eq!(s.time, 0.0);
        assert_eq!(s.pose, Vector3::new(0.0, 0.0, 0.4));
        assert!(pendulum_target(&Vector3::zeros(), 0.3, 2.0, &g).is_err());
        assert!(pendulum_target(&Vector3::zeros(), 0.3, -0.1, &g).is_err());
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_range("1,2.5").unwrap(), vec![1.0, 2.5]);
        assert!(parse_range("1:2").is_err());
        assert!(parse_range("0:1:0").is_err());
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let text = "kind = \"custom\"\nbogus = 1\n";
        let e = ScenarioSpec::parse(text, "s.toml", Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("bogus") && e.contains("line 2"), "{e}");
    }

    #[test]
    fn protocol_schedules() {
        let text = r#"
kind = "coiling2d"
tendons = [3, 4]
[[target]]
x_d = [0.01, 0.37]
[[target]]
x_d = [0.02, 0.36]
[[target]]
x_d = [0.03, 0.35]
"#;
        let spec = ScenarioSpec::parse(text, "c.toml", Path::new(".")).unwrap();
        let prep = prepare(&spec, None).unwrap();
        let order: Vec<(usize, f64, Phase)> = prep.plan.iter().map(|p| (p.target, p.window, p.phase)).collect();
        assert_eq!(
            order,
            vec![
                (0, 15.0, Phase::First),
                (1, 15.0, Phase::First),
                (2, 15.0, Phase::First),
                (1, 5.0, Phase::Replay),
                (0, 5.0, Phase::Replay),
                (1, 1.0, Phase::Replay),
                (2, 1.0, Phase::Replay),
            ]
        );
        assert!(prep.plan[..3].iter().all(|p| p.mode == Mode::TwoPhase));
        let online = prepare(&spec, Some(Mode::Online)).unwrap();
        assert!(online.plan[..3].iter().all(|p| p.mode == Mode::Online));
    }

    #[test]
    fn targets_outside_box_rejected() {
        let text = "kind = \"custom\"\nselector = [{ marker = 0.38, axis = \"z\" }]\n[[target]]\nx_d = [0.5]\nwindow = 1.0\n";
        let spec = ScenarioSpec::parse(text, "c.toml", Path::new(".")).unwrap();
        assert!(matches!(prepare(&spec, None), Err(Error::Config(_))));
    }
}
