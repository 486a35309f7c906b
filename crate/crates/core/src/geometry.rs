//! Convex-domain geometry: escape times, their derivatives, outward normals,
//! sphere charts, boundary quadrature and the ball rectification chart.
//!
//! The open ball is the first-class instance with closed-form escape times;
//! implicit level-set domains fall back to bisection along the ray.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::num::{self, V3};

/// Relative bisection tolerance for implicit ray casting.
const BISECT_REL_TOL: f64 = 1e-12;

/// The analytic gradient path is refused when the ball discriminant
/// `(x.w)^2 + R^2 - |x|^2` drops below this fraction of `R^2`: those are
/// grazing rays where the derivative blows up.
const GRAZING_REL_TOL: f64 = 1e-10;

type LevelFn = Arc<dyn Fn(V3) -> f64 + Send + Sync>;

/// Geometry oracle for an open, bounded, convex domain `G` with `C^1`
/// boundary.
#[derive(Clone)]
pub enum ConvexDomain {
    Ball {
        center: V3,
        radius: f64,
    },
    /// `G = { x | r(x) > 0 }` for a level function `r`; the caller declares
    /// convexity and a bounding radius around the origin.
    Implicit {
        level: LevelFn,
        bounding_radius: f64,
    },
}

impl ConvexDomain {
    pub fn ball(center: V3, radius: f64) -> Self {
        assert!(radius > 0.0, "ball radius must be positive");
        ConvexDomain::Ball { center, radius }
    }

    pub fn unit_ball() -> Self {
        Self::ball([0.0; 3], 1.0)
    }

    pub fn implicit(level: LevelFn, bounding_radius: f64) -> Self {
        assert!(bounding_radius > 0.0);
        ConvexDomain::Implicit {
            level,
            bounding_radius,
        }
    }

    /// Diameter bound `d = diam(G)`; every escape time satisfies
    /// `0 <= t <= d`.
    pub fn diameter(&self) -> f64 {
        match self {
            ConvexDomain::Ball { radius, .. } => 2.0 * radius,
            ConvexDomain::Implicit {
                bounding_radius, ..
            } => 2.0 * bounding_radius,
        }
    }

    pub fn inside(&self, x: V3) -> bool {
        match self {
            ConvexDomain::Ball { center, radius } => num::norm(num::sub(x, *center)) < *radius,
            ConvexDomain::Implicit { level, .. } => level(x) > 0.0,
        }
    }

    /// Inside test with a boundary tolerance: accepts points within
    /// `tol` of the closure.
    pub fn inside_closure(&self, x: V3, tol: f64) -> bool {
        match self {
            ConvexDomain::Ball { center, radius } => {
                num::norm(num::sub(x, *center)) <= radius + tol
            }
            ConvexDomain::Implicit { level, .. } => level(x) >= -tol,
        }
    }

    /// Outward unit normal at a boundary point.
    pub fn normal(&self, y: V3) -> V3 {
        match self {
            ConvexDomain::Ball { center, .. } => num::normalize(num::sub(y, *center)),
            ConvexDomain::Implicit { level, .. } => {
                // nu = -grad r / |grad r|, with -grad r pointing outwards.
                let h = 1e-6 * self.diameter();
                let mut g = [0.0; 3];
                for j in 0..3 {
                    let mut xp = y;
                    let mut xm = y;
                    xp[j] += h;
                    xm[j] -= h;
                    g[j] = (level(xp) - level(xm)) / (2.0 * h);
                }
                num::scale(-1.0, num::normalize(g))
            }
        }
    }

    /// Signed level: positive inside (ball: `R - |x - c|`).
    pub fn level(&self, x: V3) -> f64 {
        match self {
            ConvexDomain::Ball { center, radius } => radius - num::norm(num::sub(x, *center)),
            ConvexDomain::Implicit { level, .. } => level(x),
        }
    }

    /// Escape time `t(x, omega) = inf { s > 0 | x - s*omega not in G }`:
    /// the distance travelled backward along `-omega` from `x` to the
    /// boundary.
    pub fn escape_time(&self, x: V3, omega: V3) -> Result<f64> {
        self.validate_ray(x, omega)?;
        match self {
            ConvexDomain::Ball { center, radius } => {
                let xc = num::sub(x, *center);
                let xw = num::dot(xc, omega);
                let disc = xw * xw + radius * radius - num::dot(xc, xc);
                // x is inside the closure, so disc >= 0 up to rounding.
                Ok(xw + disc.max(0.0).sqrt())
            }
            ConvexDomain::Implicit { .. } => Ok(self.bisect_escape(x, num::scale(-1.0, omega))),
        }
    }

    /// Boundary-to-boundary chord length. For `(y, omega)` on the inflow
    /// set this is `tau_-(y, omega) = inf { s > 0 | y + s*omega not in G }`,
    /// for outflow pairs `tau_+(y, omega) = inf { s > 0 | y - s*omega not in G }`.
    pub fn boundary_escape_time(&self, y: V3, omega: V3) -> Result<f64> {
        if !num::is_unit(omega) {
            return Err(Error::InvalidArgument(format!(
                "direction must be a unit vector, |omega| = {}",
                num::norm(omega)
            )));
        }
        let sign = num::dot(omega, self.normal(y));
        if sign.abs() < f64::EPSILON {
            return Ok(0.0);
        }
        let travel = if sign < 0.0 {
            omega
        } else {
            num::scale(-1.0, omega)
        };
        match self {
            ConvexDomain::Ball { center, .. } => {
                let yc = num::sub(y, *center);
                Ok(2.0 * num::dot(yc, omega).abs().min(self.diameter()))
            }
            ConvexDomain::Implicit { .. } => {
                // Step just inside before marching so the bracket starts in G.
                let eps = 1e-9 * self.diameter();
                let start = num::axpy(eps, travel, y);
                if !self.inside(start) {
                    return Ok(0.0);
                }
                Ok(self.bisect_escape(start, travel) + eps)
            }
        }
    }

    /// Classifies `(y, omega)` by the sign of `omega . nu(y)`: negative is
    /// inflow, positive outflow.
    pub fn inflow_sign(&self, y: V3, omega: V3) -> f64 {
        num::dot(omega, self.normal(y))
    }

    /// Spatial and angular derivatives of the escape time:
    /// `(dt/dx_1..3, dt/domega_1..2)` in the chart tangent frame.
    ///
    /// Ball path evaluates the closed forms
    /// `dt/dx_j = omega_j + ((x.w) omega_j - x_j) / sqrt((x.w)^2 + R^2 - |x|^2)`
    /// and `dt/domega_j = <x, Obar_j(omega)> (1 + (x.w)/sqrt(...))`;
    /// implicit domains use centered differences with the declared step.
    pub fn escape_time_gradients(&self, x: V3, omega: V3) -> Result<EscapeGradients> {
        self.validate_ray(x, omega)?;
        match self {
            ConvexDomain::Ball { center, radius } => {
                let xc = num::sub(x, *center);
                let xw = num::dot(xc, omega);
                let disc = xw * xw + radius * radius - num::dot(xc, xc);
                if disc < GRAZING_REL_TOL * radius * radius {
                    return Err(Error::GrazingSingularity {
                        point: x,
                        direction: omega,
                        discriminant: disc,
                    });
                }
                let root = disc.sqrt();
                let mut dx = [0.0; 3];
                for j in 0..3 {
                    dx[j] = omega[j] + (xw * omega[j] - xc[j]) / root;
                }
                let (t1, t2) = sphere_tangent_frame(omega);
                let factor = 1.0 + xw / root;
                let domega = [num::dot(xc, t1) * factor, num::dot(xc, t2) * factor];
                Ok(EscapeGradients { dx, domega })
            }
            ConvexDomain::Implicit { .. } => self.fd_gradients(x, omega),
        }
    }

    /// Centered-difference gradients for generic domains (also used as the
    /// oracle against the ball closed forms).
    pub fn fd_gradients(&self, x: V3, omega: V3) -> Result<EscapeGradients> {
        let h = 1e-5 * self.diameter();
        let mut dx = [0.0; 3];
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            if !self.inside(xp) || !self.inside(xm) {
                return Err(Error::BoundaryStencil { point: x });
            }
            dx[j] = (self.escape_time(xp, omega)? - self.escape_time(xm, omega)?) / (2.0 * h);
        }
        let (t1, t2) = sphere_tangent_frame(omega);
        let ha = 1e-5;
        let mut domega = [0.0; 2];
        for (j, tangent) in [t1, t2].into_iter().enumerate() {
            let wp = num::normalize(num::axpy(ha, tangent, omega));
            let wm = num::normalize(num::axpy(-ha, tangent, omega));
            // Normalization keeps the perturbed direction on S; the induced
            // chart increment equals ha to second order.
            domega[j] = (self.escape_time(x, wp)? - self.escape_time(x, wm)?) / (2.0 * ha);
        }
        Ok(EscapeGradients { dx, domega })
    }

    /// Bisection ray cast: `x` inside, travel direction `dir`; returns the
    /// exit distance to tolerance `1e-12 * bounding radius`.
    fn bisect_escape(&self, x: V3, dir: V3) -> f64 {
        let d = self.diameter();
        let mut lo = 0.0;
        let mut hi = d;
        if self.inside(num::axpy(hi, dir, x)) {
            // Bounding radius guarantees this cannot happen for honest
            // inputs; clamp defensively.
            return d;
        }
        // March to tighten the initial bracket.
        let steps = 64;
        let dt = d / steps as f64;
        for k in 1..=steps {
            let s = k as f64 * dt;
            if !self.inside(num::axpy(s, dir, x)) {
                lo = s - dt;
                hi = s;
                break;
            }
        }
        let tol = BISECT_REL_TOL * 0.5 * d;
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.inside(num::axpy(mid, dir, x)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn validate_ray(&self, x: V3, omega: V3) -> Result<()> {
        if !num::is_unit(omega) {
            return Err(Error::InvalidArgument(format!(
                "direction must be a unit vector, |omega| = {}",
                num::norm(omega)
            )));
        }
        let tol = 1e-12 * self.diameter();
        if !self.inside_closure(x, tol) {
            return Err(Error::OutsideDomain { point: x });
        }
        Ok(())
    }
}

/// Escape-time derivatives at a phase point.
#[derive(Debug, Clone, Copy)]
pub struct EscapeGradients {
    /// `dt/dx_j`, `j = 1..3`.
    pub dx: V3,
    /// `dt/domega_j`, `j = 1, 2`, in the chart tangent frame.
    pub domega: [f64; 2],
}

/// Tangent frame `(Obar_1, Obar_2)` at `omega` for the latitude-longitude
/// chart: `Obar_1(omega) = (-omega_2, omega_1, 0)` and
/// `Obar_2(omega) = (w1 w3 / s, w2 w3 / s, -s)` with `s = sqrt(w1^2 + w2^2)`.
pub fn sphere_tangent_frame(omega: V3) -> (V3, V3) {
    let s = (omega[0] * omega[0] + omega[1] * omega[1]).sqrt();
    let t1 = [-omega[1], omega[0], 0.0];
    let t2 = if s > 1e-14 {
        [omega[0] * omega[2] / s, omega[1] * omega[2] / s, -s]
    } else {
        // At the poles the chart is singular; any horizontal direction works
        // for finite differences there.
        [1.0, 0.0, 0.0]
    };
    (t1, t2)
}

/// Latitude-longitude chart of the unit sphere with midpoint nodes strictly
/// interior to `(0, 2pi) x (0, pi)`; the excluded poles and seam have surface
/// measure zero. Theta cells carry their exact band masses
/// `cos(theta_j) - cos(theta_{j+1})`, so the total weight is `4 pi` at every
/// resolution.
#[derive(Debug, Clone)]
pub struct SphereChart {
    pub n_phi: usize,
    pub n_theta: usize,
    pub phis: Vec<f64>,
    pub thetas: Vec<f64>,
    /// Per-node quadrature weights, `theta`-major flattening `i = it * n_phi + ip`.
    pub weights: Vec<f64>,
    /// Unit vectors at the nodes, same flattening.
    pub nodes: Vec<V3>,
}

impl SphereChart {
    pub fn new(n_phi: usize, n_theta: usize) -> Self {
        assert!(n_phi >= 2 && n_theta >= 2, "need at least 2 nodes per axis");
        let dphi = 2.0 * PI / n_phi as f64;
        let dtheta = PI / n_theta as f64;
        let phis: Vec<f64> = (0..n_phi).map(|i| (i as f64 + 0.5) * dphi).collect();
        let thetas: Vec<f64> = (0..n_theta).map(|j| (j as f64 + 0.5) * dtheta).collect();
        let mut weights = Vec::with_capacity(n_phi * n_theta);
        let mut nodes = Vec::with_capacity(n_phi * n_theta);
        for (j, &theta) in thetas.iter().enumerate() {
            let band = (j as f64 * dtheta).cos() - ((j as f64 + 1.0) * dtheta).cos();
            for &phi in &phis {
                weights.push(dphi * band);
                nodes.push(unit_vector(phi, theta));
            }
        }
        Self {
            n_phi,
            n_theta,
            phis,
            thetas,
            weights,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Chart map `h(phi, theta)`.
    pub fn map(phi: f64, theta: f64) -> V3 {
        unit_vector(phi, theta)
    }

    /// Inverse chart: `(phi in [0, 2pi), theta in [0, pi])`.
    pub fn unmap(omega: V3) -> (f64, f64) {
        let theta = omega[2].clamp(-1.0, 1.0).acos();
        let mut phi = omega[1].atan2(omega[0]);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        (phi, theta)
    }
}

fn unit_vector(phi: f64, theta: f64) -> V3 {
    [
        phi.cos() * theta.sin(),
        phi.sin() * theta.sin(),
        theta.cos(),
    ]
}

/// A weighted node on `partial G`.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryPoint {
    pub position: V3,
    pub normal: V3,
    /// Surface-measure weight of the node's chart cell.
    pub weight: f64,
}

/// Tensor quadrature on `partial G x S` with the inflow mask and
/// `|omega . nu|` factors needed by trace integrals.
#[derive(Clone)]
pub struct BoundaryQuadrature {
    pub points: Vec<BoundaryPoint>,
    pub directions: SphereChart,
}

impl BoundaryQuadrature {
    /// Builds the product rule at the given chart resolution (nodes per
    /// chart axis; the direction sphere uses the same resolution).
    pub fn new(domain: &ConvexDomain, n_phi: usize, n_theta: usize) -> Result<Self> {
        if n_phi < 2 || n_theta < 2 {
            return Err(Error::InvalidArgument(
                "boundary quadrature needs at least 2 nodes per chart axis".into(),
            ));
        }
        let points = match domain {
            ConvexDomain::Ball { center, radius } => {
                let chart = SphereChart::new(n_phi, n_theta);
                chart
                    .nodes
                    .iter()
                    .zip(&chart.weights)
                    .map(|(n, w)| BoundaryPoint {
                        position: num::axpy(*radius, *n, *center),
                        normal: *n,
                        weight: w * radius * radius,
                    })
                    .collect()
            }
            ConvexDomain::Implicit { .. } => {
                return Err(Error::UnsupportedDomain(
                    "boundary quadrature is provided for ball domains".into(),
                ))
            }
        };
        Ok(Self {
            points,
            directions: SphereChart::new(n_phi, n_theta),
        })
    }

    /// Sum of `f(y, nu, omega) * w_y * w_omega` over all pairs; the inflow
    /// variant restricts to `omega . nu < 0`.
    pub fn integrate(&self, mut f: impl FnMut(V3, V3, V3) -> f64) -> f64 {
        let mut vals = Vec::with_capacity(self.points.len() * self.directions.len());
        for p in &self.points {
            for (omega, w) in self.directions.nodes.iter().zip(&self.directions.weights) {
                vals.push(p.weight * w * f(p.position, p.normal, *omega));
            }
        }
        num::pairwise_sum(&vals)
    }

    pub fn integrate_inflow(&self, mut f: impl FnMut(V3, V3, V3) -> f64) -> f64 {
        self.integrate(|y, nu, omega| {
            if num::dot(omega, nu) < 0.0 {
                f(y, nu, omega)
            } else {
                0.0
            }
        })
    }
}

/// Rectification chart output at a point of the unit ball.
#[derive(Debug, Clone, Copy)]
pub struct RectifiedPoint {
    /// Chart image `z = h(x) = (x1, x2, 1 - |x|^2)`.
    pub z: V3,
    /// Advected field `btilde(z, omega) = (omega . grad h_1, omega . grad h_2,
    /// omega . grad h_3) o h^{-1} = (omega_1, omega_2, -2 (omega . x))`.
    pub b_tilde: V3,
    /// `omega . nu` at the underlying point (meaningful on the boundary).
    pub inflow_sign: f64,
    /// Sign equivalence `omega . nu < 0 <=> b_tilde_3 > 0` evaluated at the
    /// point (trivially true in the interior where both sides are reported).
    pub sign_equivalence: bool,
}

/// Rectifies the unit-ball chart patch around `e_3`: requires `x_3 > 0`
/// where `h` is invertible. `domain` must be the unit ball.
pub fn rectify_ball_chart(domain: &ConvexDomain, x: V3, omega: V3) -> Result<RectifiedPoint> {
    let ConvexDomain::Ball { center, radius } = domain else {
        return Err(Error::UnsupportedDomain(
            "rectification chart is defined for the unit ball".into(),
        ));
    };
    if *radius != 1.0 || *center != [0.0, 0.0, 0.0] {
        return Err(Error::UnsupportedDomain(
            "rectification chart is defined for the unit ball".into(),
        ));
    }
    if x[2] <= 0.0 {
        return Err(Error::OutsideChart { point: x });
    }
    if !num::is_unit(omega) {
        return Err(Error::InvalidArgument("omega must be a unit vector".into()));
    }
    let z = [x[0], x[1], 1.0 - num::dot(x, x)];
    let b_tilde = [omega[0], omega[1], -2.0 * num::dot(omega, x)];
    // On the boundary nu(y) = y.
    let inflow_sign = num::dot(omega, x) * if num::norm(x) > 0.0 { 1.0 } else { 0.0 };
    let on_boundary = (num::norm(x) - 1.0).abs() < 1e-9;
    let sign_equivalence = if on_boundary {
        (inflow_sign < 0.0) == (b_tilde[2] > 0.0) || inflow_sign == 0.0
    } else {
        true
    };
    Ok(RectifiedPoint {
        z,
        b_tilde,
        inflow_sign,
        sign_equivalence,
    })
}

/// Inverse of the rectification chart on the patch `z_3 < 1 - z_1^2 - z_2^2`,
/// `x_3 > 0`: `h^{-1}(z) = (z1, z2, sqrt(1 - z3 - z1^2 - z2^2))`.
pub fn unrectify_ball_chart(z: V3) -> Result<V3> {
    let s = 1.0 - z[2] - z[0] * z[0] - z[1] * z[1];
    if s < 0.0 {
        return Err(Error::OutsideChart { point: z });
    }
    Ok([z[0], z[1], s.sqrt()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{dot, norm, normalize};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_interior(rng: &mut ChaCha8Rng, radius: f64) -> V3 {
        loop {
            let x = [
                rng.gen_range(-radius..radius),
                rng.gen_range(-radius..radius),
                rng.gen_range(-radius..radius),
            ];
            if norm(x) < 0.95 * radius {
                return x;
            }
        }
    }

    fn random_direction(rng: &mut ChaCha8Rng) -> V3 {
        loop {
            let v = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = norm(v);
            if n > 1e-3 && n < 1.0 {
                return normalize(v);
            }
        }
    }

    #[test]
    fn center_escape_is_radius() {
        let ball = ConvexDomain::unit_ball();
        for omega in [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0]] {
            assert!((ball.escape_time([0.0; 3], omega).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn offset_escape_matches_closed_form() {
        let ball = ConvexDomain::unit_ball();
        let t = ball.escape_time([0.5, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert!((t - 1.5).abs() < 1e-15);
    }

    #[test]
    fn inflow_pair_has_zero_escape_time() {
        let ball = ConvexDomain::unit_ball();
        // (y, omega) inflow: omega . nu(y) < 0, the backward ray exits
        // immediately.
        let y = [-1.0, 0.0, 0.0];
        let omega = [1.0, 0.0, 0.0];
        assert!(ball.inflow_sign(y, omega) < 0.0);
        let t = ball.escape_time(y, omega).unwrap();
        assert!(t.abs() < 1e-7, "t = {t}");
    }

    #[test]
    fn diametral_chord() {
        let ball = ConvexDomain::unit_ball();
        let tau = ball
            .boundary_escape_time([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
            .unwrap();
        assert!((tau - 2.0).abs() < 1e-12);
    }

    #[test]
    fn oblique_chord_matches_2yw() {
        let ball = ConvexDomain::unit_ball();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let y = [0.0, -1.0, 0.0];
        let omega = [s, s, 0.0];
        let tau = ball.boundary_escape_time(y, omega).unwrap();
        assert!((tau - 2.0f64.sqrt()).abs() < 1e-12);
        // Cross-check with a bisection cast on the same ball expressed
        // implicitly.
        let implicit = ConvexDomain::implicit(Arc::new(|x: V3| 1.0 - norm(x)), 1.0);
        let tau2 = implicit.boundary_escape_time(y, omega).unwrap();
        assert!((tau - tau2).abs() < 1e-8);
    }

    #[test]
    fn grazing_chord_vanishes() {
        let ball = ConvexDomain::unit_ball();
        // omega nearly tangent at y: omega . nu -> 0^- gives tau_- -> 0.
        let y = [0.0, -1.0, 0.0];
        let eps = 1e-6;
        let omega = normalize([1.0, eps, 0.0]);
        let tau = ball.boundary_escape_time(y, omega).unwrap();
        assert!(tau < 3e-6, "tau = {tau}");
    }

    #[test]
    fn raycast_oracle_equivalence() {
        // 1e4 random (x, omega): |analytic - bisection| < 1e-10 R.
        let ball = ConvexDomain::unit_ball();
        let implicit = ConvexDomain::implicit(Arc::new(|x: V3| 1.0 - norm(x)), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let x = random_interior(&mut rng, 1.0);
            let w = random_direction(&mut rng);
            let ta = ball.escape_time(x, w).unwrap();
            let tb = implicit.escape_time(x, w).unwrap();
            assert!((ta - tb).abs() < 1e-10, "analytic {ta} vs bisect {tb}");
        }
    }

    #[test]
    fn semigroup_property() {
        let ball = ConvexDomain::unit_ball();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = random_interior(&mut rng, 1.0);
            let w = random_direction(&mut rng);
            let t = ball.escape_time(x, w).unwrap();
            let s = rng.gen_range(0.0..t);
            let shifted = ball.escape_time(num::axpy(-s, w, x), w).unwrap();
            assert!((shifted - (t - s)).abs() < 1e-12 * (1.0 + t));
        }
    }

    #[test]
    fn boundary_consistency() {
        // t(y + s*omega, omega) = s for inflow (y, omega), 0 < s < tau_-.
        let ball = ConvexDomain::unit_ball();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let y = random_direction(&mut rng);
            let w = random_direction(&mut rng);
            if ball.inflow_sign(y, w) >= -0.05 {
                continue;
            }
            let tau = ball.boundary_escape_time(y, w).unwrap();
            let s = rng.gen_range(0.01 * tau..0.99 * tau);
            let t = ball.escape_time(num::axpy(s, w, y), w).unwrap();
            assert!((t - s).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_at_center() {
        let ball = ConvexDomain::unit_ball();
        let g = ball
            .escape_time_gradients([0.0; 3], [0.0, 0.0, 1.0])
            .unwrap();
        // t == R at the center: dt/dx = omega, dt/domega = 0.
        assert!((g.dx[2] - 1.0).abs() < 1e-14);
        assert!(g.dx[0].abs() < 1e-14 && g.dx[1].abs() < 1e-14);
        assert!(g.domega[0].abs() < 1e-14 && g.domega[1].abs() < 1e-14);
    }

    #[test]
    fn gradient_closed_form_point() {
        let ball = ConvexDomain::unit_ball();
        let g = ball
            .escape_time_gradients([0.5, 0.0, 0.0], [1.0, 0.0, 0.0])
            .unwrap();
        assert!((g.dx[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ball = ConvexDomain::unit_ball();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 200 {
            let x = random_interior(&mut rng, 1.0);
            let w = random_direction(&mut rng);
            let xc = num::dot(x, w);
            let disc = xc * xc + 1.0 - num::dot(x, x);
            if disc < 0.05 || norm(x) > 0.9 {
                continue;
            }
            let g = ball.escape_time_gradients(x, w).unwrap();
            let fd = ball.fd_gradients(x, w).unwrap();
            for j in 0..3 {
                assert!((g.dx[j] - fd.dx[j]).abs() < 1e-6, "dx{j}");
            }
            for j in 0..2 {
                assert!((g.domega[j] - fd.domega[j]).abs() < 1e-6, "domega{j}");
            }
            checked += 1;
        }
    }

    #[test]
    fn grazing_gradient_is_refused() {
        let ball = ConvexDomain::unit_ball();
        // Nearly tangential ray close to the boundary.
        let x = [0.999_999_999, 0.0, 0.0];
        let err = ball
            .escape_time_gradients(x, [0.0, 1.0, 0.0])
            .expect_err("grazing must be refused");
        assert!(matches!(err, Error::GrazingSingularity { .. }));
    }

    #[test]
    fn chart_nodes_are_unit_and_tangent() {
        let chart = SphereChart::new(16, 8);
        for node in &chart.nodes {
            assert!((norm(*node) - 1.0).abs() < 1e-14);
            let (t1, t2) = sphere_tangent_frame(*node);
            assert!(dot(t1, *node).abs() < 1e-13);
            assert!(dot(t2, *node).abs() < 1e-13);
        }
    }

    #[test]
    fn sphere_weights_sum_to_4pi() {
        let chart = SphereChart::new(12, 7);
        let total = num::pairwise_sum(&chart.weights);
        assert!((total - 4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn boundary_measures() {
        let ball = ConvexDomain::unit_ball();
        let quad = BoundaryQuadrature::new(&ball, 32, 16).unwrap();
        let total = quad.integrate(|_, _, _| 1.0);
        assert!((total - 16.0 * PI * PI).abs() / (16.0 * PI * PI) < 1e-3);
        let inflow = quad.integrate_inflow(|_, _, _| 1.0);
        assert!((inflow - 8.0 * PI * PI).abs() / (8.0 * PI * PI) < 1e-3);
        let weighted = quad.integrate_inflow(|_, nu, w| dot(w, nu).abs());
        assert!((weighted - 4.0 * PI * PI).abs() / (4.0 * PI * PI) < 1e-3);
    }

    #[test]
    fn rectification_signs() {
        let ball = ConvexDomain::unit_ball();
        let r = rectify_ball_chart(&ball, [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]).unwrap();
        assert!(r.inflow_sign < 0.0);
        assert!((r.b_tilde[2] - 2.0).abs() < 1e-14);
        assert!(r.sign_equivalence);

        let grazing = rectify_ball_chart(&ball, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]).unwrap();
        assert!(grazing.inflow_sign.abs() < 1e-14);
        assert!(grazing.b_tilde[2].abs() < 1e-14);
    }

    #[test]
    fn rectification_round_trip() {
        let ball = ConvexDomain::unit_ball();
        let x = [0.0, 0.0, 0.5];
        let r = rectify_ball_chart(&ball, x, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.z, [0.0, 0.0, 0.75]);
        assert!(r.z[2] > 0.0);
        let back = unrectify_ball_chart(r.z).unwrap();
        for j in 0..3 {
            assert!((back[j] - x[j]).abs() < 1e-14);
        }
        assert!(rectify_ball_chart(&ball, [0.0, 0.0, -0.5], [1.0, 0.0, 0.0]).is_err());
    }
}
