//! Robot description: conical geometry, material, strain basis and tendon
//! routes, plus the quadrature caches every evaluation shares.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Matrix6xX, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::actuation::{RouteKind, TendonGrid, TendonRoute};
use crate::error::{Error, Result};
use crate::kinematics::Grid;
use crate::liegroup::Twist;
use crate::quadrature::{legendre_with_derivative, GaussRule};

/// Cone geometry, material and gravity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RodGeometry {
    /// Backbone length (m).
    pub length: f64,
    pub base_radius: f64,
    pub tip_radius: f64,
    /// kg/m^3
    pub density: f64,
    /// Pa
    pub young_modulus: f64,
    /// Pa
    pub shear_modulus: f64,
    /// Gravity expressed in the base frame (m/s^2). The default hangs the
    /// arm along its own +z axis.
    pub gravity: [f64; 3],
}

impl Default for RodGeometry {
    fn default() -> Self {
        // Ecoflex 00-50 nominal values; not identified parameters.
        Self {
            length: 0.38,
            base_radius: 0.0160,
            tip_radius: 0.0048,
            density: 1070.0,
            young_modulus: 83.0e3,
            shear_modulus: 83.0e3 / 3.0,
            gravity: [0.0, 0.0, 9.81],
        }
    }
}

impl RodGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("tip_radius", self.tip_radius),
            ("density", self.density),
            ("young_modulus", self.young_modulus),
            ("shear_modulus", self.shear_modulus),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.base_radius < self.tip_radius || !self.base_radius.is_finite() {
            return Err(Error::Config("base_radius must be >= tip_radius".into()));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("gravity must be finite".into()));
        }
        Ok(())
    }

    /// Linearly tapered radius r(X).
    pub fn radius(&self, x: f64) -> f64 {
        self.base_radius + (self.tip_radius - self.base_radius) * x / self.length
    }

    pub fn radius_slope(&self) -> f64 {
        (self.tip_radius - self.base_radius) / self.length
    }

    pub fn area(&self, x: f64) -> f64 {
        let r = self.radius(x);
        PI * r * r
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    pub fn total_mass(&self) -> f64 {
        let (rb, rt) = (self.base_radius, self.tip_radius);
        self.density * PI * self.length * (rb * rb + rb * rt + rt * rt) / 3.0
    }

    /// Screw inertia density `diag(rho I, rho I, rho J, rho A, rho A, rho A)`
    /// in `(angular, linear)` order; torsion is about the local z axis.
    pub fn inertia_density(&self, x: f64) -> Vector6<f64> {
        let r = self.radius(x);
        let area = PI * r * r;
        let bend = PI * r.powi(4) / 4.0;
        let rho = self.density;
        Vector6::new(rho * bend, rho * bend, 2.0 * rho * bend, rho * area, rho * area, rho * area)
    }

    /// Cross-section stiffness `diag(EI, EI, GJ, GA, GA, EA)`.
    pub fn stiffness_density(&self, x: f64) -> Vector6<f64> {
        let r = self.radius(x);
        let area = PI * r * r;
        let bend = PI * r.powi(4) / 4.0;
        let (e, g) = (self.young_modulus, self.shear_modulus);
        Vector6::new(e * bend, e * bend, 2.0 * g * bend, g * area, g * area, e * area)
    }
}

/// Strain components, named by deformation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrainComponent {
    Torsion,
    BendX,
    BendY,
    ShearX,
    ShearY,
    Axial,
}

impl StrainComponent {
    pub const ALL: [StrainComponent; 6] = [
        StrainComponent::BendX,
        StrainComponent::BendY,
        StrainComponent::Torsion,
        StrainComponent::Axial,
        StrainComponent::ShearX,
        StrainComponent::ShearY,
    ];

    /// Row of the component inside a `(angular, linear)` twist.
    pub fn row(self) -> usize {
        match self {
            StrainComponent::BendX => 0,
            StrainComponent::BendY => 1,
            StrainComponent::Torsion => 2,
            StrainComponent::ShearX => 3,
            StrainComponent::ShearY => 4,
            StrainComponent::Axial => 5,
        }
    }
}

/// Polynomial degree per component; -1 freezes the component at its
/// reference value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub torsion: i32,
    pub bend_x: i32,
    pub bend_y: i32,
    pub shear_x: i32,
    pub shear_y: i32,
    pub axial: i32,
    /// Component priority used to order modes of equal polynomial order.
    pub order: Vec<StrainComponent>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            torsion: 1,
            bend_x: 2,
            bend_y: 2,
            shear_x: -1,
            shear_y: -1,
            axial: 1,
            order: StrainComponent::ALL.to_vec(),
        }
    }
}

impl BasisConfig {
    pub fn degree(&self, c: StrainComponent) -> i32 {
        match c {
            StrainComponent::Torsion => self.torsion,
            StrainComponent::BendX => self.bend_x,
            StrainComponent::BendY => self.bend_y,
            StrainComponent::ShearX => self.shear_x,
            StrainComponent::ShearY => self.shear_y,
            StrainComponent::Axial => self.axial,
        }
    }

    /// Only the named components active, each with the given degree.
    pub fn only(components: &[(StrainComponent, i32)]) -> Self {
        let mut cfg = Self {
            torsion: -1,
            bend_x: -1,
            bend_y: -1,
            shear_x: -1,
            shear_y: -1,
            axial: -1,
            order: StrainComponent::ALL.to_vec(),
        };
        for &(c, d) in components {
            match c {
                StrainComponent::Torsion => cfg.torsion = d,
                StrainComponent::BendX => cfg.bend_x = d,
                StrainComponent::BendY => cfg.bend_y = d,
                StrainComponent::ShearX => cfg.shear_x = d,
                StrainComponent::ShearY => cfg.shear_y = d,
                StrainComponent::Axial => cfg.axial = d,
            }
        }
        cfg
    }
}

/// One generalized coordinate: a shifted Legendre polynomial of a given
/// order acting on a single strain component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrainMode {
    pub component: StrainComponent,
    pub order: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrainBasis {
    modes: Vec<StrainMode>,
    degrees: [i32; 6],
    reference: Twist,
    length: f64,
}

impl StrainBasis {
    pub fn new(cfg: &BasisConfig, length: f64) -> Result<Self> {
        let mut priority = cfg.order.clone();
        for c in StrainComponent::ALL {
            if !priority.contains(&c) {
                priority.push(c);
            }
        }
        if priority.len() != 6 {
            return Err(Error::Config("basis order lists a component twice".into()));
        }
        let mut degrees = [-1; 6];
        for c in StrainComponent::ALL {
            let d = cfg.degree(c);
            if d < -1 {
                return Err(Error::Config(format!("degree of {c:?} must be >= -1")));
            }
            degrees[c.row()] = d;
        }
        let max_degree = degrees.iter().copied().max().unwrap_or(-1);
        let mut modes = Vec::new();
        for order in 0..=max_degree.max(0) as usize {
            for &c in &priority {
                if degrees[c.row()] >= order as i32 {
                    modes.push(StrainMode { component: c, order });
                }
            }
        }
        if modes.is_empty() {
            return Err(Error::Config("strain basis has no active component".into()));
        }
        Ok(Self {
            modes,
            degrees,
            reference: Twist::new(Vector3::zeros(), Vector3::z()),
            length,
        })
    }

    pub fn dim(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[StrainMode] {
        &self.modes
    }

    pub fn degree(&self, c: StrainComponent) -> i32 {
        self.degrees[c.row()]
    }

    /// Reference strain: straight, unstretched rod.
    pub fn reference(&self) -> Twist {
        self.reference
    }

    /// `B_q(X)`: one nonzero per column.
    pub fn eval(&self, x: f64) -> Matrix6xX<f64> {
        self.eval_with_derivative(x).0
    }

    /// `B_q(X)` and `dB_q/dX`.
    pub fn eval_with_derivative(&self, x: f64) -> (Matrix6xX<f64>, Matrix6xX<f64>) {
        let s = 2.0 * x / self.length - 1.0;
        let scale = 2.0 / self.length;
        let n = self.dim();
        let mut b = Matrix6xX::zeros(n);
        let mut db = Matrix6xX::zeros(n);
        for (j, mode) in self.modes.iter().enumerate() {
            let (p, d) = legendre_with_derivative(mode.order, s);
            b[(mode.component.row(), j)] = p;
            db[(mode.component.row(), j)] = d * scale;
        }
        (b, db)
    }
}

/// Quadrature resolution knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    /// Gauss-Legendre nodes over [0, L] for M, C, K, D, F.
    pub gauss_nodes: usize,
    /// Product-of-exponentials subintervals for forward kinematics.
    pub fk_intervals: usize,
    /// Composite two-node Gauss segments along each tendon.
    pub tendon_segments: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Self { gauss_nodes: 33, fk_intervals: 32, tendon_segments: 16 }
    }
}

/// Serializable model description (the `[model]` table of a config file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub geometry: RodGeometry,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub numerics: Numerics,
    /// Stiffness-proportional damping time constant (s).
    #[serde(default = "default_damping_time")]
    pub damping_time: f64,
    #[serde(default = "default_routes", rename = "tendon")]
    pub tendons: Vec<TendonRoute>,
}

fn default_damping_time() -> f64 {
    0.05
}

fn default_routes() -> Vec<TendonRoute> {
    let deg = PI / 180.0;
    let route = |id, kind, angle: f64| TendonRoute {
        id,
        kind,
        base_angle: angle * deg,
        radial_offset_fraction: 0.5,
        termination: 0.325,
        friction: 0.1,
    };
    vec![
        route(1, RouteKind::Crossed, 60.0),
        route(2, RouteKind::Crossed, 120.0),
        route(3, RouteKind::Straight, 30.0),
        route(4, RouteKind::Straight, 150.0),
    ]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            geometry: RodGeometry::default(),
            basis: BasisConfig::default(),
            numerics: Numerics::default(),
            damping_time: default_damping_time(),
            tendons: default_routes(),
        }
    }
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Cached per-node data of the backbone quadrature.
#[derive(Clone, Debug)]
pub(crate) struct NodeData {
    pub x: f64,
    pub weight: f64,
    pub inertia: Vector6<f64>,
}

/// Immutable robot description with precomputed quadrature caches.
#[derive(Clone, Debug)]
pub struct RobotModel {
    config: ModelConfig,
    basis: StrainBasis,
    pub(crate) nodes: Vec<NodeData>,
    pub(crate) dyn_grid: Grid,
    pub(crate) tendon_grids: Vec<TendonGrid>,
    stiffness: DMatrix<f64>,
    damping: DMatrix<f64>,
}

impl RobotModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let geo = &config.geometry;
        geo.validate()?;
        let num = &config.numerics;
        if num.gauss_nodes == 0 || num.fk_intervals == 0 || num.tendon_segments == 0 {
            return Err(Error::Config("quadrature resolutions must be positive".into()));
        }
        if !(config.damping_time >= 0.0 && config.damping_time.is_finite()) {
            return Err(Error::Config("damping_time must be non-negative".into()));
        }
        if config.tendons.is_empty() {
            return Err(Error::Config("at least one tendon is required".into()));
        }
        for (i, route) in config.tendons.iter().enumerate() {
            route.validate(geo.length)?;
            if config.tendons[..i].iter().any(|r| r.id == route.id) {
                return Err(Error::Config(format!("duplicate tendon id {}", route.id)));
            }
        }
        let basis = StrainBasis::new(&config.basis, geo.length)?;
        let rule = GaussRule::on_interval(num.gauss_nodes, 0.0, geo.length);
        let nodes: Vec<NodeData> = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(&x, &w)| NodeData { x, weight: w, inertia: geo.inertia_density(x) })
            .collect();
        let n = basis.dim();
        let mut stiffness = DMatrix::zeros(n, n);
        for node in &nodes {
            let b = basis.eval(node.x);
            let sigma = geo.stiffness_density(node.x);
            let weighted = Matrix6xX::from_fn(n, |r, c| sigma[r] * b[(r, c)]);
            stiffness += b.transpose() * weighted * node.weight;
        }
        stiffness = (&stiffness + stiffness.transpose()) * 0.5;
        let damping = &stiffness * config.damping_time;
        let dyn_grid = Grid::new(&basis, nodes.iter().map(|n| n.x).collect());
        let tendon_grids = config
            .tendons
            .iter()
            .map(|route| TendonGrid::new(route, geo, &basis, num.tendon_segments))
            .collect();
        Ok(Self { config, basis, nodes, dyn_grid, tendon_grids, stiffness, damping })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ModelConfig::load(path)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> &RodGeometry {
        &self.config.geometry
    }

    pub fn basis(&self) -> &StrainBasis {
        &self.basis
    }

    pub fn routes(&self) -> &[TendonRoute] {
        &self.config.tendons
    }

    pub fn numerics(&self) -> &Numerics {
        &self.config.numerics
    }

    pub fn length(&self) -> f64 {
        self.config.geometry.length
    }

    /// Number of generalized coordinates.
    pub fn dof(&self) -> usize {
        self.basis.dim()
    }

    /// Number of tendons.
    pub fn actuators(&self) -> usize {
        self.config.tendons.len()
    }

    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }

    pub fn damping(&self) -> &DMatrix<f64> {
        &self.damping
    }

    /// Copy restricted to the listed tendon ids, in the listed order.
    pub fn with_tendons(&self, ids: &[usize]) -> Result<Self> {
        let mut cfg = self.config.clone();
        let mut routes = Vec::with_capacity(ids.len());
        for id in ids {
            let route = self
                .config
                .tendons
                .iter()
                .find(|r| r.id == *id)
                .ok_or_else(|| Error::Config(format!("unknown tendon id {id}")))?;
            routes.push(route.clone());
        }
        cfg.tendons = routes;
        Self::new(cfg)
    }

    /// Copy with multiplicative parameter errors: elastic moduli, density and
    /// tendon friction scaled by `1 + delta`.
    pub fn perturbed(&self, stiffness: f64, density: f64, friction: f64) -> Result<Self> {
        for (name, d) in [("stiffness", stiffness), ("density", density), ("friction", friction)] {
            if !(d.abs() < 0.5) {
                return Err(Error::Config(format!("{name} perturbation must be below 50%")));
            }
        }
        let mut cfg = self.config.clone();
        cfg.geometry.young_modulus *= 1.0 + stiffness;
        cfg.geometry.shear_modulus *= 1.0 + stiffness;
        cfg.geometry.density *= 1.0 + density;
        for r in &mut cfg.tendons {
            r.friction *= 1.0 + friction;
        }
        Self::new(cfg)
    }
}

impl Default for RobotModel {
    fn default() -> Self {
        Self::new(ModelConfig::default()).expect("default model is valid")
    }
}
