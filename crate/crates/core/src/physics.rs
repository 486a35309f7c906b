//! Collision coefficients and kernels: total cross section, stopping power,
//! angular diffusion/drift coefficients, the three restricted collision
//! kernels with their Schur bounds, the elastic scattering circle, the
//! screened Rutherford cross section, and the CSDA range map.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::num::{self, MonotoneCubic, V3};
use crate::phase::{l2_norm, EnergyInterval, McEstimate, PhaseField, PhaseGrid};

/// Floor below which the Rutherford screening parameter is rejected.
pub const SCREENING_FLOOR: f64 = 1e-12;

/// Floor below which a stopping power is rejected (`a >= kappa > 0`).
pub const STOPPING_FLOOR: f64 = 1e-10;

/// Scattering-angle cosine between pre- and post-collision directions at
/// energies `(E', E)` in rest-mass units:
/// `mu(E', E) = sqrt( E (E' + 2) / (E' (E + 2)) )`.
///
/// Downscatter only: requires `E' >= E > 0`; `mu = 1` iff `E' = E`.
pub fn mu(e_prime: f64, e: f64) -> Result<f64> {
    if e <= 0.0 || e_prime <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "energies must be positive, got E'={e_prime}, E={e}"
        )));
    }
    if e > e_prime {
        return Err(Error::Kinematics { e_prime, e });
    }
    Ok((e * (e_prime + 2.0) / (e_prime * (e + 2.0))).sqrt().min(1.0))
}

/// Point on the elastic scattering circle
/// `Gamma(E', E, omega) = { w' in S | w'.w = mu(E', E) }`:
/// `gamma(s) = mu w + sqrt(1 - mu^2) (cos s u + sin s v)` where `(u, v, w)`
/// is the deterministic right-handed frame from [`num::orthonormal_frame`].
pub fn gamma_circle(e_prime: f64, e: f64, omega: V3, s: f64) -> Result<V3> {
    let m = mu(e_prime, e)?;
    let r = (1.0 - m * m).max(0.0).sqrt();
    let (u, v) = num::orthonormal_frame(omega);
    Ok([
        m * omega[0] + r * (s.cos() * u[0] + s.sin() * v[0]),
        m * omega[1] + r * (s.cos() * u[1] + s.sin() * v[1]),
        m * omega[2] + r * (s.cos() * u[2] + s.sin() * v[2]),
    ])
}

/// Screened Rutherford elastic cross section
/// `sigma0(x) (E+1)^2 / (E^2 (E+2)^2) * 1 / (1 - w'.w + q(x,E))^2`.
pub fn rutherford_sigma2(
    x: V3,
    omega_prime: V3,
    omega: V3,
    e: f64,
    sigma0: f64,
    q: f64,
) -> Result<f64> {
    if sigma0 < 0.0 {
        return Err(Error::Model("sigma0 must be nonnegative".into()));
    }
    if q < SCREENING_FLOOR {
        return Err(Error::Model(format!(
            "screening parameter q={q} below floor {SCREENING_FLOOR}"
        )));
    }
    let _ = x;
    let c_e = (e + 1.0) * (e + 1.0) / (e * e * (e + 2.0) * (e + 2.0));
    let denom = 1.0 - num::dot(omega_prime, omega) + q;
    Ok(sigma0 * c_e / (denom * denom))
}

/// Analytic sphere integral of the Rutherford kernel over `omega'`:
/// `2 pi sigma0 C_E [ 1/q - 1/(2+q) ]` (substitute `u = w'.w`).
pub fn rutherford_sphere_integral(e: f64, sigma0: f64, q: f64) -> f64 {
    let c_e = (e + 1.0) * (e + 1.0) / (e * e * (e + 2.0) * (e + 2.0));
    2.0 * PI * sigma0 * c_e * (1.0 / q - 1.0 / (2.0 + q))
}

type Kernel1Fn = Arc<dyn Fn(V3, V3, V3, f64, f64) -> f64 + Send + Sync>;
type Kernel2Fn = Arc<dyn Fn(V3, V3, V3, f64) -> f64 + Send + Sync>;
type Kernel3Fn = Arc<dyn Fn(V3, f64, f64) -> f64 + Send + Sync>;
type SigmaFn = Arc<dyn Fn(V3, V3, f64) -> f64 + Send + Sync>;
type CoefXeFn = Arc<dyn Fn(V3, f64) -> f64 + Send + Sync>;

/// Which restricted collision kernel an operation applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisionKernel {
    /// Full integral over `S' x I'` with kernel `sigma1(x, w', w, E', E)`.
    K1,
    /// Angle-local kernel `sigma2(x, w', w, E)` integrated over `S'`.
    K2,
    /// Elastic-circle kernel `sigma3(x, E', E)` integrated over
    /// `I' x [0, 2 pi]` along `gamma(E', E, w)(s)`.
    K3,
}

/// Total cross section / coefficient field, constant or position-dependent.
#[derive(Clone)]
pub enum Coefficient {
    Const(f64),
    Fn(SigmaFn),
}

impl Coefficient {
    pub fn eval(&self, x: V3, omega: V3, e: f64) -> f64 {
        match self {
            Coefficient::Const(v) => *v,
            Coefficient::Fn(f) => f(x, omega, e),
        }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self {
            Coefficient::Const(v) => Some(*v),
            Coefficient::Fn(_) => None,
        }
    }
}

/// Stopping power `a`: constant or a function of energy (solvers assume
/// independence of `x`).
#[derive(Clone)]
pub enum StoppingPower {
    Const(f64),
    Fn(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl StoppingPower {
    pub fn eval(&self, e: f64) -> f64 {
        match self {
            StoppingPower::Const(v) => *v,
            StoppingPower::Fn(f) => f(e),
        }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self {
            StoppingPower::Const(v) => Some(*v),
            StoppingPower::Fn(_) => None,
        }
    }
}

/// Declared Schur constants for a kernel; verified against sampled
/// estimates when present.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct SchurConstants {
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    /// Derivative constants of the kernel gradient rows/columns; recorded
    /// as estimates rather than certificates.
    pub m1_prime: Option<f64>,
    pub m2_prime: Option<f64>,
}

/// Coefficients and kernels of the transport operator.
#[derive(Clone, Default)]
pub struct CollisionModel {
    /// Total cross section `Sigma(x, omega, E) >= 0`.
    pub sigma_t: Option<Coefficient>,
    /// Stopping power `a(E) >= kappa > 0` (CSDA drift coefficient).
    pub stopping: Option<StoppingPower>,
    /// Angular diffusion coefficient `c(x, E)`.
    pub c_diffusion: Option<CoefXeFn>,
    /// Angular drift `d(x, omega, E)` in chart components.
    pub d_drift: Option<Arc<dyn Fn(V3, V3, f64) -> [f64; 2] + Send + Sync>>,
    pub sigma1: Option<Kernel1Fn>,
    pub sigma2: Option<Kernel2Fn>,
    pub sigma3: Option<Kernel3Fn>,
    /// Exponential shift baked into K1/K3 kernels: factor `e^{C (E - E')}`.
    pub shift: f64,
    pub declared: SchurConstants,
}

impl CollisionModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sigma_t(mut self, sigma: Coefficient) -> Self {
        self.sigma_t = Some(sigma);
        self
    }

    pub fn with_stopping(mut self, a: StoppingPower) -> Self {
        self.stopping = Some(a);
        self
    }

    pub fn with_constant_k2(mut self, c0: f64) -> Self {
        self.sigma2 = Some(Arc::new(move |_, _, _, _| c0));
        self
    }

    pub fn with_rutherford_k2(mut self, sigma0: f64, q: f64) -> Self {
        self.sigma2 = Some(Arc::new(move |x, wp, w, e| {
            rutherford_sigma2(x, wp, w, e, sigma0, q).unwrap_or(0.0)
        }));
        self
    }

    pub fn with_constant_k1(mut self, c0: f64) -> Self {
        self.sigma1 = Some(Arc::new(move |_, _, _, _, _| c0));
        self
    }

    pub fn with_constant_k3(mut self, c0: f64) -> Self {
        self.sigma3 = Some(Arc::new(move |_, _, _| c0));
        self
    }

    pub fn with_kernel2(mut self, k: Kernel2Fn) -> Self {
        self.sigma2 = Some(k);
        self
    }

    pub fn with_kernel1(mut self, k: Kernel1Fn) -> Self {
        self.sigma1 = Some(k);
        self
    }

    pub fn with_kernel3(mut self, k: Kernel3Fn) -> Self {
        self.sigma3 = Some(k);
        self
    }

    pub fn with_declared(mut self, declared: SchurConstants) -> Self {
        self.declared = declared;
        self
    }

    pub fn sigma_t_at(&self, x: V3, omega: V3, e: f64) -> f64 {
        self.sigma_t.as_ref().map_or(0.0, |s| s.eval(x, omega, e))
    }

    pub fn has_kernel(&self, kernel: CollisionKernel) -> bool {
        match kernel {
            CollisionKernel::K1 => self.sigma1.is_some(),
            CollisionKernel::K2 => self.sigma2.is_some(),
            CollisionKernel::K3 => self.sigma3.is_some(),
        }
    }

    /// Exponentially shifted model `K_{r,C} phi = e^{CE} K_r (e^{-CE'} phi)`.
    ///
    /// K2 is energy-local, so it is unchanged; K1 and K3 kernels gain the
    /// factor `e^{C (E - E')}`.
    pub fn shifted_kernel(&self, c_shift: f64) -> Result<CollisionModel> {
        if c_shift < 0.0 {
            return Err(Error::InvalidArgument("shift C must be nonnegative".into()));
        }
        let mut out = self.clone();
        out.shift = self.shift + c_shift;
        if let Some(s1) = &self.sigma1 {
            let s1 = s1.clone();
            out.sigma1 = Some(Arc::new(move |x, wp, w, ep, e| {
                s1(x, wp, w, ep, e) * (c_shift * (e - ep)).exp()
            }));
        }
        if let Some(s3) = &self.sigma3 {
            let s3 = s3.clone();
            out.sigma3 = Some(Arc::new(move |x, ep, e| {
                s3(x, ep, e) * (c_shift * (e - ep)).exp()
            }));
        }
        Ok(out)
    }

    /// Pointwise application of one collision integral at `(x, omega, E)`
    /// using the grid's sphere/energy quadrature.
    ///
    /// K3 integrates `E'` over the downscatter range `[E, Em]` where the
    /// elastic circle exists (`mu <= 1`).
    pub fn apply_kernel_at(
        &self,
        kernel: CollisionKernel,
        grid: &PhaseGrid,
        field: &PhaseField,
        x: V3,
        omega: V3,
        e: f64,
    ) -> Result<f64> {
        match kernel {
            CollisionKernel::K1 => {
                let s1 = self.sigma1.as_ref().ok_or_else(|| {
                    Error::Configuration("collision model has no sigma1 kernel".into())
                })?;
                let mut vals =
                    Vec::with_capacity(grid.sphere.len() * grid.energies.len());
                for (wp, ww) in grid.sphere.nodes.iter().zip(&grid.sphere.weights) {
                    for &ep in &grid.energies {
                        vals.push(
                            ww * grid.energy_weight
                                * s1(x, *wp, omega, ep, e)
                                * field.eval(x, *wp, ep),
                        );
                    }
                }
                Ok(num::pairwise_sum(&vals))
            }
            CollisionKernel::K2 => {
                let s2 = self.sigma2.as_ref().ok_or_else(|| {
                    Error::Configuration("collision model has no sigma2 kernel".into())
                })?;
                let mut vals = Vec::with_capacity(grid.sphere.len());
                for (wp, ww) in grid.sphere.nodes.iter().zip(&grid.sphere.weights) {
                    vals.push(ww * s2(x, *wp, omega, e) * field.eval(x, *wp, e));
                }
                Ok(num::pairwise_sum(&vals))
            }
            CollisionKernel::K3 => {
                let s3 = self.sigma3.as_ref().ok_or_else(|| {
                    Error::Configuration("collision model has no sigma3 kernel".into())
                })?;
                // Quadrature over the circle parameter and the admissible
                // energy range E' in [E, Em].
                let n_s = 16usize;
                let ds = 2.0 * PI / n_s as f64;
                let e_lo = e.max(grid.interval.min);
                let e_hi = grid.interval.max;
                if e_hi <= e_lo {
                    return Ok(0.0);
                }
                let n_e = grid.energies.len().max(4);
                let de = (e_hi - e_lo) / n_e as f64;
                let mut vals = Vec::with_capacity(n_e * n_s);
                for k in 0..n_e {
                    let ep = e_lo + (k as f64 + 0.5) * de;
                    let sig = s3(x, ep, e);
                    for i in 0..n_s {
                        let s = (i as f64 + 0.5) * ds;
                        let wp = gamma_circle(ep, e, omega, s)?;
                        vals.push(de * ds * sig * field.eval(x, wp, ep));
                    }
                }
                Ok(num::pairwise_sum(&vals))
            }
        }
    }

    /// Applies a collision kernel to a field, sampling the result on the
    /// grid. Linear in the field; preserves nonnegativity.
    pub fn apply_collision(
        &self,
        kernel: CollisionKernel,
        grid: &Arc<PhaseGrid>,
        field: &PhaseField,
    ) -> Result<PhaseField> {
        if !self.has_kernel(kernel) {
            return Err(Error::Configuration(format!(
                "collision model lacks the requested kernel {kernel:?}"
            )));
        }
        let n_w = grid.sphere.len();
        let n_e = grid.energies.len();
        let results: Vec<Result<Vec<f64>>> = grid
            .spatial
            .par_iter()
            .map(|sn| {
                let mut chunk = Vec::with_capacity(n_w * n_e);
                // K2/K1 row values depend on (x, E) through the field slice;
                // precompute field samples at this x.
                let mut samples = vec![0.0; n_w * n_e];
                for iw in 0..n_w {
                    for ie in 0..n_e {
                        samples[iw * n_e + ie] =
                            field.eval(sn.position, grid.sphere.nodes[iw], grid.energies[ie]);
                    }
                }
                for iw in 0..n_w {
                    let omega = grid.sphere.nodes[iw];
                    for ie in 0..n_e {
                        let e = grid.energies[ie];
                        let v = match kernel {
                            CollisionKernel::K2 => {
                                let s2 = self.sigma2.as_ref().unwrap();
                                let mut vals = Vec::with_capacity(n_w);
                                for (jw, (wp, ww)) in grid
                                    .sphere
                                    .nodes
                                    .iter()
                                    .zip(&grid.sphere.weights)
                                    .enumerate()
                                {
                                    vals.push(
                                        ww * s2(sn.position, *wp, omega, e)
                                            * samples[jw * n_e + ie],
                                    );
                                }
                                num::pairwise_sum(&vals)
                            }
                            CollisionKernel::K1 => {
                                let s1 = self.sigma1.as_ref().unwrap();
                                let mut vals = Vec::with_capacity(n_w * n_e);
                                for (jw, (wp, ww)) in grid
                                    .sphere
                                    .nodes
                                    .iter()
                                    .zip(&grid.sphere.weights)
                                    .enumerate()
                                {
                                    for (je, &ep) in grid.energies.iter().enumerate() {
                                        vals.push(
                                            ww * grid.energy_weight
                                                * s1(sn.position, *wp, omega, ep, e)
                                                * samples[jw * n_e + je],
                                        );
                                    }
                                }
                                num::pairwise_sum(&vals)
                            }
                            CollisionKernel::K3 => self.apply_kernel_at(
                                kernel,
                                grid,
                                field,
                                sn.position,
                                omega,
                                e,
                            )?,
                        };
                        chunk.push(v);
                    }
                }
                Ok(chunk)
            })
            .collect();
        let mut values = Vec::with_capacity(grid.node_count());
        for r in results {
            values.extend(r?);
        }
        PhaseField::sampled(
            grid.clone(),
            values,
            format!("{kernel:?}({})", field.name()),
        )
    }

    /// Row integral `int sigma(row at (x, omega, E))` of a kernel — the
    /// first Schur quantity. `transpose` swaps the kernel arguments to give
    /// the column integral.
    fn schur_integral(
        &self,
        kernel: CollisionKernel,
        grid: &PhaseGrid,
        x: V3,
        omega: V3,
        e: f64,
        transpose: bool,
    ) -> Result<f64> {
        match kernel {
            CollisionKernel::K1 => {
                let s1 = self.sigma1.as_ref().ok_or_else(|| {
                    Error::Configuration("collision model has no sigma1 kernel".into())
                })?;
                let mut vals = Vec::new();
                for (wp, ww) in grid.sphere.nodes.iter().zip(&grid.sphere.weights) {
                    for &ep in &grid.energies {
                        let v = if transpose {
                            s1(x, omega, *wp, e, ep)
                        } else {
                            s1(x, *wp, omega, ep, e)
                        };
                        vals.push(ww * grid.energy_weight * v);
                    }
                }
                Ok(num::pairwise_sum(&vals))
            }
            CollisionKernel::K2 => {
                let s2 = self.sigma2.as_ref().ok_or_else(|| {
                    Error::Configuration("collision model has no sigma2 kernel".into())
                })?;
                let mut vals = Vec::new();
                for (wp, ww) in grid.sphere.nodes.iter().zip(&grid.sphere.weights) {
                    let v = if transpose {
                        s2(x, omega, *wp, e)
                    } else {
                        s2(x, *wp, omega, e)
                    };
                    vals.push(ww * v);
                }
                Ok(num::pairwise_sum(&vals))
            }
            CollisionKernel::K3 => {
                let s3 = self.sigma3.as_ref().ok_or_else(|| {
                    Error::Configuration("collision model has no sigma3 kernel".into())
                })?;
                // Row: incoming energies E' >= E; column: outgoing E' <= E.
                let (lo, hi) = if transpose {
                    (grid.interval.min, e)
                } else {
                    (e, grid.interval.max)
                };
                if hi <= lo {
                    return Ok(0.0);
                }
                let n = 64;
                let de = (hi - lo) / n as f64;
                let mut vals = Vec::with_capacity(n);
                for k in 0..n {
                    let ep = lo + (k as f64 + 0.5) * de;
                    let v = if transpose {
                        s3(x, e, ep)
                    } else {
                        s3(x, ep, e)
                    };
                    vals.push(de * v);
                }
                Ok(num::pairwise_sum(&vals))
            }
        }
    }
}

/// Sampled Schur bounds and the resulting operator-norm certificate.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SchurReport {
    pub kernel: String,
    /// Row-integral supremum estimate (max over samples).
    pub m1_hat: f64,
    /// Column-integral supremum estimate.
    pub m2_hat: f64,
    /// 99th percentile of the sampled row/column integrals.
    pub m1_p99: f64,
    pub m2_p99: f64,
    /// Operator-norm certificate `sqrt(M1 M2)` (times `2 pi` for K3).
    pub certificate: f64,
    pub samples: usize,
}

/// Estimates the Schur constants by dense sampling over the phase grid plus
/// seeded Monte Carlo points, and forms the operator-norm certificate of
/// the kernel.
pub fn schur_bounds(
    model: &CollisionModel,
    kernel: CollisionKernel,
    grid: &PhaseGrid,
    mc_samples: usize,
    seed: u64,
) -> Result<SchurReport> {
    if !model.has_kernel(kernel) {
        return Err(Error::Configuration(format!(
            "collision model lacks the requested kernel {kernel:?}"
        )));
    }
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    // Dense pass over a thinned grid sample.
    let stride = (grid.spatial.len() / 64).max(1);
    for sn in grid.spatial.iter().step_by(stride) {
        for iw in (0..grid.sphere.len()).step_by(4.max(grid.sphere.len() / 16)) {
            for &e in &grid.energies {
                let w = grid.sphere.nodes[iw];
                rows.push(model.schur_integral(kernel, grid, sn.position, w, e, false)?);
                cols.push(model.schur_integral(kernel, grid, sn.position, w, e, true)?);
            }
        }
    }
    // Monte Carlo pass.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..mc_samples {
        let x = loop {
            let c = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let p = num::scale(grid.domain.diameter() / 2.0, c);
            if grid.domain.inside(p) {
                break p;
            }
        };
        let w = crate::phase::random_unit(&mut rng);
        let e = rng.gen_range(grid.interval.min.max(1e-9)..grid.interval.max);
        rows.push(model.schur_integral(kernel, grid, x, w, e, false)?);
        cols.push(model.schur_integral(kernel, grid, x, w, e, true)?);
    }
    for v in rows.iter().chain(&cols) {
        if !v.is_finite() {
            return Err(Error::AssumptionViolation(
                "kernel row/column integral diverges under sampling".into(),
            ));
        }
    }
    let mut sorted_rows = rows.clone();
    let mut sorted_cols = cols.clone();
    sorted_rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted_cols.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |v: &[f64], p: f64| v[(((v.len() - 1) as f64) * p) as usize];
    let m1_hat = *sorted_rows.last().unwrap();
    let m2_hat = *sorted_cols.last().unwrap();
    let factor = if kernel == CollisionKernel::K3 {
        2.0 * PI
    } else {
        1.0
    };
    Ok(SchurReport {
        kernel: format!("{kernel:?}"),
        m1_hat,
        m2_hat,
        m1_p99: pct(&sorted_rows, 0.99),
        m2_p99: pct(&sorted_cols, 0.99),
        certificate: factor * (m1_hat * m2_hat).sqrt(),
        samples: rows.len(),
    })
}

/// Rayleigh-quotient probe `||K psi|| / ||psi||` for a random smooth field.
pub fn rayleigh_probe(
    model: &CollisionModel,
    kernel: CollisionKernel,
    grid: &Arc<PhaseGrid>,
    seed: u64,
) -> Result<f64> {
    let field = random_smooth_field(grid, seed);
    let num = l2_norm(grid, &model.apply_collision(kernel, grid, &field)?)?;
    let den = l2_norm(grid, &field)?;
    Ok(num / den)
}

/// Random smooth closure field: a positive mixture of Gaussians in `x`
/// modulated by low-order direction/energy factors.
pub fn random_smooth_field(grid: &PhaseGrid, seed: u64) -> PhaseField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = grid.domain.diameter() / 2.0;
    let n_bumps = 3;
    let mut bumps = Vec::new();
    for _ in 0..n_bumps {
        let c = [
            rng.gen_range(-0.5 * radius..0.5 * radius),
            rng.gen_range(-0.5 * radius..0.5 * radius),
            rng.gen_range(-0.5 * radius..0.5 * radius),
        ];
        let w = rng.gen_range(0.3 * radius..radius);
        let a = rng.gen_range(0.2..1.0f64);
        bumps.push((c, w, a));
    }
    let b: V3 = crate::phase::random_unit(&mut rng);
    let bw = rng.gen_range(0.0..0.9f64);
    let ec = rng.gen_range(-0.5..0.5f64);
    let e_mid = 0.5 * (grid.interval.min + grid.interval.max);
    let e_scale = grid.interval.measure().max(1e-12);
    PhaseField::closure(format!("random({seed})"), move |x, w, e| {
        let mut v = 0.0;
        for (c, width, amp) in &bumps {
            let d = num::sub(x, *c);
            v += amp * (-num::dot(d, d) / (width * width)).exp();
        }
        v * (1.0 + bw * num::dot(b, w)) * (1.0 + ec * (e - e_mid) / e_scale)
    })
}

/// Coercivity margin report: the sampled infimum `c'` of the two
/// accretivity expressions.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CoercivityReport {
    pub margin: f64,
    pub samples: usize,
}

/// Samples `c' = inf [ Sigma - (row sums of present kernels) ]` over the
/// phase grid plus Monte Carlo points. A negative margin is a valid report,
/// not an error.
pub fn coercivity_margin(
    model: &CollisionModel,
    grid: &PhaseGrid,
    mc_samples: usize,
    seed: u64,
) -> Result<CoercivityReport> {
    let mut margin = f64::INFINITY;
    let mut count = 0usize;
    let mut visit = |x: V3, w: V3, e: f64| -> Result<()> {
        let sigma = model.sigma_t_at(x, w, e);
        for transpose in [false, true] {
            let mut lhs = sigma;
            for kernel in [CollisionKernel::K1, CollisionKernel::K2, CollisionKernel::K3] {
                if model.has_kernel(kernel) {
                    let mut v = model.schur_integral(kernel, grid, x, w, e, !transpose)?;
                    if kernel == CollisionKernel::K3 {
                        v *= 2.0 * PI;
                    }
                    lhs -= v;
                }
            }
            margin = margin.min(lhs);
        }
        count += 1;
        Ok(())
    };
    let stride = (grid.spatial.len() / 32).max(1);
    for sn in grid.spatial.iter().step_by(stride) {
        for iw in (0..grid.sphere.len()).step_by(4.max(grid.sphere.len() / 8)) {
            for &e in &grid.energies {
                visit(sn.position, grid.sphere.nodes[iw], e)?;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..mc_samples {
        let x = loop {
            let c = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let p = num::scale(grid.domain.diameter() / 2.0, c);
            if grid.domain.inside(p) {
                break p;
            }
        };
        let w = crate::phase::random_unit(&mut rng);
        let e = rng.gen_range(grid.interval.min.max(1e-9)..grid.interval.max);
        visit(x, w, e)?;
    }
    Ok(CoercivityReport {
        margin,
        samples: count,
    })
}

/// Quadratic-form probe `<(Sigma - K) psi, psi> - c' ||psi||^2` on a random
/// field; nonnegative (within quadrature slack) whenever the margin is
/// positive.
pub fn coercivity_probe(
    model: &CollisionModel,
    grid: &Arc<PhaseGrid>,
    margin: f64,
    seed: u64,
) -> Result<f64> {
    let psi = random_smooth_field(grid, seed);
    let sigma_model = model.clone();
    let sigma_psi = {
        let psi = psi.clone();
        PhaseField::closure("Sigma psi", move |x, w, e| {
            sigma_model.sigma_t_at(x, w, e) * psi.eval(x, w, e)
        })
    };
    let mut quad_form = crate::phase::inner_product(grid, &sigma_psi, &psi)?;
    for kernel in [CollisionKernel::K1, CollisionKernel::K2, CollisionKernel::K3] {
        if model.has_kernel(kernel) {
            let k_psi = model.apply_collision(kernel, grid, &psi)?;
            quad_form -= crate::phase::inner_product(grid, &k_psi, &psi)?;
        }
    }
    let norm_sq = crate::phase::inner_product(grid, &psi, &psi)?;
    Ok(quad_form - margin * norm_sq)
}

/// Tabulated CSDA range `R(E) = int_0^E 1/a` with monotone-cubic inverse.
pub struct RangeMap {
    forward: MonotoneCubic,
    inverse: MonotoneCubic,
    pub r_max: f64,
    pub interval: EnergyInterval,
    r_values: Vec<f64>,
    e_values: Vec<f64>,
}

impl RangeMap {
    /// Builds the range map on `n` nodes by composite trapezoid integration
    /// of `1/a`. Requires `E0 = 0` and `a >= kappa > 0`.
    pub fn new(a: &StoppingPower, interval: EnergyInterval, n: usize) -> Result<RangeMap> {
        if interval.min != 0.0 {
            return Err(Error::InvalidArgument(
                "range map requires E0 = 0".into(),
            ));
        }
        let n = n.max(8);
        let de = interval.measure() / (n - 1) as f64;
        let mut es = Vec::with_capacity(n);
        let mut rs = Vec::with_capacity(n);
        let mut acc = 0.0;
        let mut prev_inv = {
            let a0 = a.eval(0.0);
            if a0 < STOPPING_FLOOR {
                return Err(Error::Model(format!(
                    "stopping power {a0} below floor {STOPPING_FLOOR} at E=0"
                )));
            }
            1.0 / a0
        };
        es.push(0.0);
        rs.push(0.0);
        for k in 1..n {
            let e = k as f64 * de;
            let ak = a.eval(e);
            if ak < STOPPING_FLOOR {
                return Err(Error::Model(format!(
                    "stopping power {ak} below floor {STOPPING_FLOOR} at E={e}"
                )));
            }
            let inv = 1.0 / ak;
            acc += 0.5 * de * (prev_inv + inv);
            prev_inv = inv;
            es.push(e);
            rs.push(acc);
        }
        let r_max = *rs.last().unwrap();
        Ok(RangeMap {
            forward: MonotoneCubic::new(es.clone(), rs.clone()),
            inverse: MonotoneCubic::new(rs.clone(), es.clone()),
            r_max,
            interval,
            r_values: rs,
            e_values: es,
        })
    }

    /// `R(E)`.
    pub fn range(&self, e: f64) -> f64 {
        self.forward.eval(e)
    }

    /// `R^{-1}(eta)` by monotone cubic interpolation with a bisection
    /// fallback when the cubic drifts beyond interpolation tolerance.
    pub fn inverse(&self, eta: f64) -> f64 {
        let eta = eta.clamp(0.0, self.r_max);
        let mut e = self.inverse.eval(eta);
        let res = self.forward.eval(e) - eta;
        if res.abs() > 1e-10 * self.r_max.max(1.0) {
            // Bracket bisection on the tabulated nodes.
            let idx = self
                .r_values
                .partition_point(|r| *r < eta)
                .clamp(1, self.r_values.len() - 1);
            let (mut lo, mut hi) = (self.e_values[idx - 1], self.e_values[idx]);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if self.forward.eval(mid) < eta {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            e = 0.5 * (lo + hi);
        }
        e
    }

    /// Remaining-path parameter `eta(E) = (Em - E) / a` for constant `a`.
    pub fn eta_const(a: f64, e_max: f64, e: f64) -> f64 {
        (e_max - e) / a
    }
}

/// Builds a range map as the public operation, validating the floor.
pub fn range_map(a: &StoppingPower, interval: EnergyInterval, n: usize) -> Result<RangeMap> {
    RangeMap::new(a, interval, n)
}

/// Estimate of the Rutherford sphere integral by chart quadrature, used to
/// cross-check the closed form.
pub fn rutherford_quadrature_integral(
    chart: &crate::geometry::SphereChart,
    omega: V3,
    e: f64,
    sigma0: f64,
    q: f64,
) -> f64 {
    let mut vals = Vec::with_capacity(chart.len());
    for (wp, ww) in chart.nodes.iter().zip(&chart.weights) {
        vals.push(ww * rutherford_sigma2([0.0; 3], *wp, omega, e, sigma0, q).unwrap_or(0.0));
    }
    num::pairwise_sum(&vals)
}

/// Monte Carlo estimate helper reused by verify suites.
pub fn mc_value(samples: &[f64]) -> McEstimate {
    let (value, stderr) = num::mean_stderr(samples);
    McEstimate {
        value,
        stderr,
        samples: samples.len(),
    }
}
