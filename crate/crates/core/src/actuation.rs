//! Tendon routing, actuation matrix with configuration-dependent friction,
//! tendon lengths and actuation coordinates.
//!
//! In the local frame the tendon path derivative is
//! `p' = [hat(xi) (d, 1)]_3 + d' = w x d + v + d'`, its unit tangent is
//! `t = p' / |p'|`, and the tendon wrench column is `(d x t, t)`. Friction
//! attenuates each column by `exp(-mu_S(X))` with
//! `mu_S(X) = mu * int_0^X phi`, `phi = |d(R t)/dX| = |w x t + t'|` the
//! arc rate of the cable direction.
//!
//! Sign convention: `A` follows `A^T = dL_c/dq`, so a pulling tendon is a
//! negative input `u`. Tension magnitudes are `-u`.

use nalgebra::{DMatrix, DVector, Matrix6xX, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RobotModel, RodGeometry, StrainBasis};
use crate::quadrature::GaussRule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKind {
    Straight,
    /// Azimuth sweeps linearly from `base_angle` to its mirror `pi - base_angle`.
    Crossed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TendonRoute {
    pub id: usize,
    pub kind: RouteKind,
    /// Azimuth at the base, measured from the cross-section x axis (rad).
    #[serde(rename = "base_angle_deg", with = "degrees")]
    pub base_angle: f64,
    /// Tendon offset as a fraction of the local radius.
    #[serde(default = "half")]
    pub radial_offset_fraction: f64,
    /// Termination abscissa (m).
    pub termination: f64,
    /// Friction coefficient per radian of cable direction change.
    #[serde(default)]
    pub friction: f64,
}

fn half() -> f64 {
    0.5
}

mod degrees {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rad: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(rad.to_degrees())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(f64::deserialize(d)?.to_radians())
    }
}

impl TendonRoute {
    pub fn validate(&self, length: f64) -> Result<()> {
        if !(self.termination > 0.0 && self.termination <= length) {
            return Err(Error::Config(format!(
                "tendon {}: termination {} outside (0, {length}]",
                self.id, self.termination
            )));
        }
        if !(self.radial_offset_fraction > 0.0 && self.radial_offset_fraction < 1.0) {
            return Err(Error::Config(format!(
                "tendon {}: radial_offset_fraction must lie in (0, 1)",
                self.id
            )));
        }
        if !(self.friction >= 0.0 && self.friction.is_finite()) {
            return Err(Error::Config(format!("tendon {}: friction must be >= 0", self.id)));
        }
        if !self.base_angle.is_finite() {
            return Err(Error::Config(format!("tendon {}: base angle not finite", self.id)));
        }
        Ok(())
    }

    fn azimuth_rate(&self) -> f64 {
        match self.kind {
            RouteKind::Straight => 0.0,
            RouteKind::Crossed => (std::f64::consts::PI - 2.0 * self.base_angle) / self.termination,
        }
    }

    /// Offset `d` and its first two X-derivatives in the local frame.
    fn offsets(&self, geo: &RodGeometry, x: f64) -> [Vector3<f64>; 3] {
        let f = self.radial_offset_fraction;
        let r = geo.radius(x);
        let dr = geo.radius_slope();
        let rate = self.azimuth_rate();
        let alpha = self.base_angle + rate * x;
        let radial = Vector3::new(alpha.cos(), alpha.sin(), 0.0);
        let tangential = Vector3::new(-alpha.sin(), alpha.cos(), 0.0);
        [
            radial * (f * r),
            radial * (f * dr) + tangential * (f * r * rate),
            tangential * (2.0 * f * dr * rate) - radial * (f * r * rate * rate),
        ]
    }
}

/// Tendon offset `d(X)` and `d'(X)`.
pub fn tendon_point(
    route: &TendonRoute,
    model: &RobotModel,
    x: f64,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if !(0.0..=route.termination).contains(&x) {
        return Err(Error::Domain { x, limit: route.termination });
    }
    let [d, d1, _] = route.offsets(model.geometry(), x);
    Ok((d, d1))
}

/// Sample along a tendon with everything that does not depend on q.
#[derive(Clone, Debug)]
pub(crate) struct TendonSample {
    weight: f64,
    b: Matrix6xX<f64>,
    db: Matrix6xX<f64>,
    d: [Vector3<f64>; 3],
}

impl TendonSample {
    fn new(route: &TendonRoute, geo: &RodGeometry, basis: &StrainBasis, x: f64, weight: f64) -> Self {
        let (b, db) = basis.eval_with_derivative(x);
        Self { weight, b, db, d: route.offsets(geo, x) }
    }
}

/// Local path quantities at one sample.
struct PathLocal {
    speed: f64,
    tangent: Vector3<f64>,
    phi: f64,
}

fn path_local(sample: &TendonSample, xi: &Vector6<f64>, dxi: &Vector6<f64>) -> Result<PathLocal> {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    let dw = Vector3::new(dxi[0], dxi[1], dxi[2]);
    let dv = Vector3::new(dxi[3], dxi[4], dxi[5]);
    let [d, d1, d2] = &sample.d;
    let p1 = w.cross(d) + v + d1;
    let p2 = dw.cross(d) + w.cross(d1) + dv + d2;
    let speed = p1.norm();
    if !(speed > 1e-12) {
        return Err(Error::Numerical("degenerate tendon tangent (zero path speed)".into()));
    }
    let t = p1 / speed;
    let dt = (p2 - t * t.dot(&p2)) / speed;
    Ok(PathLocal { speed, tangent: t, phi: (w.cross(&t) + dt).norm() })
}

/// Precomputed quadrature for one tendon over [0, L_t]: composite two-point
/// Gauss nodes, plus a two-point rule on every gap between consecutive nodes
/// so the cumulative friction integral is monotone by construction.
#[derive(Clone, Debug)]
pub(crate) struct TendonGrid {
    nodes: Vec<TendonSample>,
    gaps: Vec<[TendonSample; 2]>,
    friction: f64,
}

impl TendonGrid {
    pub fn new(route: &TendonRoute, geo: &RodGeometry, basis: &StrainBasis, segments: usize) -> Self {
        let rule = GaussRule::composite(2, segments, 0.0, route.termination);
        Self::from_nodes(route, geo, basis, &rule.nodes, &rule.weights)
    }

    fn from_nodes(
        route: &TendonRoute,
        geo: &RodGeometry,
        basis: &StrainBasis,
        xs: &[f64],
        ws: &[f64],
    ) -> Self {
        let mut nodes = Vec::with_capacity(xs.len());
        let mut gaps = Vec::with_capacity(xs.len());
        let mut a = 0.0;
        for (&x, &w) in xs.iter().zip(ws) {
            nodes.push(TendonSample::new(route, geo, basis, x, w));
            let gap = GaussRule::on_interval(2, a, x);
            gaps.push([
                TendonSample::new(route, geo, basis, gap.nodes[0], gap.weights[0]),
                TendonSample::new(route, geo, basis, gap.nodes[1], gap.weights[1]),
            ]);
            a = x;
        }
        Self { nodes, gaps, friction: route.friction }
    }

    /// Walks the nodes with the running friction exponent.
    fn walk(
        &self,
        q: &DVector<f64>,
        reference: &Vector6<f64>,
        mut visit: impl FnMut(&TendonSample, &PathLocal, f64),
    ) -> Result<()> {
        let mut mu = 0.0;
        for (node, gap) in self.nodes.iter().zip(&self.gaps) {
            if self.friction > 0.0 {
                let mut acc = 0.0;
                for s in gap {
                    let local = path_local(s, &(reference + &s.b * q), &(&s.db * q))?;
                    acc += s.weight * local.phi;
                }
                mu += self.friction * acc;
            }
            let local = path_local(node, &(reference + &node.b * q), &(&node.db * q))?;
            visit(node, &local, mu);
        }
        Ok(())
    }
}

/// Actuation quantities evaluated at one configuration.
#[derive(Clone, Debug)]
pub struct ActuationEval {
    /// `A(q)`, n x n_a.
    pub matrix: DMatrix<f64>,
    /// Tendon path lengths `L_c` (m).
    pub lengths: DVector<f64>,
    /// Friction-weighted actuation coordinates `theta_a` (m).
    pub coordinates: DVector<f64>,
}

pub fn evaluate(model: &RobotModel, q: &DVector<f64>) -> Result<ActuationEval> {
    let n = model.dof();
    let na = model.actuators();
    if q.len() != n {
        return Err(Error::Config(format!("configuration has {} entries, expected {n}", q.len())));
    }
    let reference = model.basis().reference().to_vector();
    let mut matrix = DMatrix::zeros(n, na);
    let mut lengths = DVector::zeros(na);
    let mut coordinates = DVector::zeros(na);
    for (k, grid) in model.tendon_grids.iter().enumerate() {
        let mut col = DVector::zeros(n);
        let (mut len, mut theta) = (0.0, 0.0);
        grid.walk(q, &reference, |s, local, mu| {
            let atten = (-mu).exp();
            let t = local.tangent;
            let m = s.d[0].cross(&t);
            let wrench = Vector6::new(m.x, m.y, m.z, t.x, t.y, t.z) * (s.weight * atten);
            col += s.b.tr_mul(&wrench);
            len += s.weight * local.speed;
            theta += s.weight * atten * local.speed;
        })?;
        matrix.set_column(k, &col);
        lengths[k] = len;
        coordinates[k] = theta;
    }
    Ok(ActuationEval { matrix, lengths, coordinates })
}

/// `A(q) = int B_q^T B_tau exp(-mu_S) dX`.
pub fn actuation_matrix(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(evaluate(model, q)?.matrix)
}

/// Tendon path lengths `L_c(q)`.
pub fn tendon_length(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(evaluate(model, q)?.lengths)
}

/// Friction-modified actuation coordinates `theta_a(q)`; equal to `L_c`
/// without friction.
pub fn actuation_coordinates(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(evaluate(model, q)?.coordinates)
}

fn local_at(
    route: &TendonRoute,
    model: &RobotModel,
    q: &DVector<f64>,
    x: f64,
) -> Result<PathLocal> {
    if !(0.0..=route.termination).contains(&x) {
        return Err(Error::Domain { x, limit: route.termination });
    }
    let s = TendonSample::new(route, model.geometry(), model.basis(), x, 0.0);
    let reference = model.basis().reference().to_vector();
    path_local(&s, &(reference + &s.b * q), &(&s.db * q))
}

/// Unit tangent of the tendon path in the local frame.
pub fn tendon_tangent(
    route: &TendonRoute,
    model: &RobotModel,
    q: &DVector<f64>,
    x: f64,
) -> Result<Vector3<f64>> {
    Ok(local_at(route, model, q, x)?.tangent)
}

/// Arc rate of the cable direction `phi(X)` (rad/m).
pub fn direction_rate(
    route: &TendonRoute,
    model: &RobotModel,
    q: &DVector<f64>,
    x: f64,
) -> Result<f64> {
    Ok(local_at(route, model, q, x)?.phi)
}

/// `mu_S(X) = mu * int_0^X phi`, integrated on the same gap rules as the
/// actuation matrix so values agree at the shared nodes.
pub fn friction_exponent(
    route: &TendonRoute,
    model: &RobotModel,
    q: &DVector<f64>,
    x: f64,
) -> Result<f64> {
    if !(0.0..=route.termination).contains(&x) {
        return Err(Error::Domain { x, limit: route.termination });
    }
    if route.friction == 0.0 || x == 0.0 {
        return Ok(0.0);
    }
    let rule = GaussRule::composite(2, model.numerics().tendon_segments, 0.0, route.termination);
    let mut xs: Vec<f64> = rule.nodes.iter().copied().filter(|&n| n < x).collect();
    xs.push(x);
    let ws = vec![0.0; xs.len()];
    let grid = TendonGrid::from_nodes(route, model.geometry(), model.basis(), &xs, &ws);
    let mut last = 0.0;
    grid.walk(q, &model.basis().reference().to_vector(), |_, _, mu| last = mu)?;
    Ok(last)
}

/// Friction exponent at every tendon quadrature node, as `(X, mu_S)`.
pub fn friction_profile(
    model: &RobotModel,
    tendon: usize,
    q: &DVector<f64>,
) -> Result<Vec<(f64, f64)>> {
    let route = model
        .routes()
        .get(tendon)
        .ok_or_else(|| Error::Config(format!("no tendon at index {tendon}")))?;
    let rule = GaussRule::composite(2, model.numerics().tendon_segments, 0.0, route.termination);
    let grid = &model.tendon_grids[tendon];
    let mut out = Vec::with_capacity(rule.nodes.len());
    let mut i = 0;
    grid.walk(q, &model.basis().reference().to_vector(), |_, _, mu| {
        out.push((rule.nodes[i], mu));
        i += 1;
    })?;
    Ok(out)
}

/// Affine map `theta_a ~ offset + gain * L_c` fitted by least squares over
/// sampled configurations; used when only tendon lengths are measured.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthMap {
    pub offset: DVector<f64>,
    pub gain: DMatrix<f64>,
}

impl LengthMap {
    pub fn fit(model: &RobotModel, samples: &[DVector<f64>]) -> Result<Self> {
        let na = model.actuators();
        if samples.len() < na + 1 {
            return Err(Error::Config(format!("need at least {} samples to fit", na + 1)));
        }
        let mut design = DMatrix::zeros(samples.len(), na + 1);
        let mut target = DMatrix::zeros(samples.len(), na);
        for (i, q) in samples.iter().enumerate() {
            let ev = evaluate(model, q)?;
            design[(i, 0)] = 1.0;
            for k in 0..na {
                design[(i, k + 1)] = ev.lengths[k];
                target[(i, k)] = ev.coordinates[k];
            }
        }
        let coef = design
            .svd(true, true)
            .solve(&target, 1e-14)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(Self {
            offset: coef.row(0).transpose(),
            gain: coef.rows(1, na).transpose(),
        })
    }

    pub fn apply(&self, lengths: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.gain * lengths
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BasisConfig, ModelConfig, StrainComponent};
    use std::f64::consts::PI;

    fn model_with(f: impl FnOnce(&mut ModelConfig)) -> RobotModel {
        let mut cfg = ModelConfig::default();
        f(&mut cfg);
        RobotModel::new(cfg).unwrap()
    }

    fn random_q(n: usize, seed: u64) -> DVector<f64> {
        let mut s = seed;
        DVector::from_fn(n, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 6.0
        })
    }

    #[test]
    fn straight_route_offset_at_base() {
        let model = RobotModel::default();
        let route = &model.routes()[2];
        let (d, _) = tendon_point(route, &model, 0.0).unwrap();
        let expect = Vector3::new((30f64).to_radians().cos(), (30f64).to_radians().sin(), 0.0) * (0.5 * 0.016);
        assert!((d - expect).norm() < 1e-16);
        assert!(matches!(tendon_point(route, &model, 0.33), Err(Error::Domain { .. })));
    }

    #[test]
    fn crossed_route_mirrors_at_termination() {
        let model = RobotModel::default();
        let route = &model.routes()[0];
        let (d, _) = tendon_point(route, &model, route.termination).unwrap();
        let angle = d.y.atan2(d.x);
        assert!((angle - 120f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn offset_derivative_matches_finite_difference() {
        let model = RobotModel::default();
        for route in model.routes() {
            let x = 0.17;
            let h = 1e-6;
            let (dp, _) = tendon_point(route, &model, x + h).unwrap();
            let (dm, _) = tendon_point(route, &model, x - h).unwrap();
            let (_, d1) = tendon_point(route, &model, x).unwrap();
            assert!(((dp - dm) / (2.0 * h) - d1).norm() < 1e-7);
        }
    }

    #[test]
    fn tangents_on_straight_rod() {
        let model = RobotModel::default();
        let q = DVector::zeros(model.dof());
        let straight = &model.routes()[2];
        let t = tendon_tangent(straight, &model, &q, 0.1).unwrap();
        assert!((t.norm() - 1.0).abs() < 1e-12);
        assert!(t.z > 0.999);
        let crossed = &model.routes()[0];
        let t = tendon_tangent(crossed, &model, &q, 0.1).unwrap();
        let alpha = crossed.base_angle + crossed.azimuth_rate() * 0.1;
        let azimuthal = Vector3::new(-alpha.sin(), alpha.cos(), 0.0);
        let rate = crossed.azimuth_rate() * 0.5 * model.geometry().radius(0.1);
        let dr = 0.5 * model.geometry().radius_slope();
        let expected = rate / (1.0 + rate * rate + dr * dr).sqrt();
        assert!((t.dot(&azimuthal) - expected).abs() < 1e-14);
    }

    #[test]
    fn frictionless_coordinates_equal_lengths() {
        let model = model_with(|c| c.tendons.iter_mut().for_each(|r| r.friction = 0.0));
        let q = random_q(model.dof(), 3);
        let ev = evaluate(&model, &q).unwrap();
        assert_eq!(ev.coordinates, ev.lengths);
        let route = &model.routes()[1];
        assert_eq!(friction_exponent(route, &model, &q, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn no_taper_no_curvature_means_no_friction() {
        let model = model_with(|c| c.geometry.tip_radius = c.geometry.base_radius);
        let q = DVector::zeros(model.dof());
        let route = &model.routes()[2];
        assert!(friction_exponent(route, &model, &q, route.termination).unwrap().abs() < 1e-15);
        let lengths = tendon_length(&model, &q).unwrap();
        assert!((lengths[2] - route.termination).abs() < 1e-15);
    }

    #[test]
    fn straight_route_length_with_taper() {
        let model = RobotModel::default();
        let q = DVector::zeros(model.dof());
        let route = &model.routes()[3];
        let slope = route.radial_offset_fraction * model.geometry().radius_slope();
        let exact = route.termination * (1.0 + slope * slope).sqrt();
        assert!((tendon_length(&model, &q).unwrap()[3] - exact).abs() < 1e-14);
    }

    #[test]
    fn bending_toward_tendon_shortens_it() {
        let model = RobotModel::default();
        let n = model.dof();
        let base = tendon_length(&model, &DVector::zeros(n)).unwrap();
        // Tendon 3 at 30 deg has d_y > 0: negative bend_x curls toward it.
        let mut q = DVector::zeros(n);
        q[0] = -0.5;
        let toward = tendon_length(&model, &q).unwrap();
        q[0] = 0.5;
        let away = tendon_length(&model, &q).unwrap();
        assert!(toward[2] < base[2] && away[2] > base[2]);
    }

    #[test]
    fn friction_reduces_columns() {
        let model = RobotModel::default();
        let clean = model_with(|c| c.tendons.iter_mut().for_each(|r| r.friction = 0.0));
        let q = random_q(model.dof(), 11);
        let a = actuation_matrix(&model, &q).unwrap();
        let a0 = actuation_matrix(&clean, &q).unwrap();
        for k in 0..4 {
            assert!(a.column(k).norm() < a0.column(k).norm());
        }
        let theta = actuation_coordinates(&model, &q).unwrap();
        let lengths = tendon_length(&model, &q).unwrap();
        for k in 0..4 {
            assert!(theta[k] < lengths[k]);
        }
    }

    #[test]
    fn constant_exponent_factors_out() {
        // A straight untapered rod bent at constant curvature: phi is exactly
        // constant along a straight route, so theta = L_c * mean attenuation.
        let model = model_with(|c| {
            c.geometry.tip_radius = c.geometry.base_radius;
            c.basis = BasisConfig::only(&[(StrainComponent::BendX, 0)]);
        });
        let q = DVector::from_element(1, 4.0);
        let route = &model.routes()[3];
        let phi0 = direction_rate(route, &model, &q, 0.0).unwrap();
        let phi1 = direction_rate(route, &model, &q, 0.3).unwrap();
        assert!((phi0 - phi1).abs() < 1e-12);
        let mu = friction_exponent(route, &model, &q, 0.2).unwrap();
        assert!((mu - route.friction * phi0 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn friction_exponent_matches_profile_nodes() {
        let model = RobotModel::default();
        let q = random_q(model.dof(), 5);
        let profile = friction_profile(&model, 1, &q).unwrap();
        let route = &model.routes()[1];
        for &(x, mu) in profile.iter().step_by(7) {
            let direct = friction_exponent(route, &model, &q, x).unwrap();
            assert!((direct - mu).abs() < 1e-13);
        }
        assert!(profile.windows(2).all(|p| p[1].1 >= p[0].1));
    }

    #[test]
    fn length_map_recovers_frictionless_identity() {
        let model = model_with(|c| c.tendons.iter_mut().for_each(|r| r.friction = 0.0));
        let samples: Vec<_> = (0..12).map(|s| random_q(model.dof(), s)).collect();
        let map = LengthMap::fit(&model, &samples).unwrap();
        assert!((&map.gain - DMatrix::identity(4, 4)).norm() < 1e-9);
        assert!(map.offset.norm() < 1e-9);
        let _ = PI;
    }
}
