//! Explicit solution formulas along characteristics and the Neumann-series
//! solver for the equation with angle-local scattering.
//!
//! All explicit solvers return closure-backed fields: they evaluate the
//! defining ray integrals lazily at any requested phase point. The Neumann
//! solver iterates on grid samples and wraps the result with multilinear
//! interpolation.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{BoundaryQuadrature, ConvexDomain};
use crate::num::{self, V3};
use crate::phase::{
    l2_norm, sphere_derivatives_at, trace_norm, trace_slice_norm, BoundaryField, EnergyInterval,
    PhaseField, PhaseGrid, TraceWeight,
};
use crate::physics::{range_map, Coefficient, CollisionKernel, CollisionModel, StoppingPower};

/// Ray-quadrature policy for integrals along characteristics.
///
/// The default is composite Gauss-Legendre with panels of length at most
/// `diameter / 32`, doubled until the relative increment drops below
/// `1e-9`. Fixing `panels` disables the adaptivity (used by convergence
/// sweeps).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RayQuadrature {
    pub fixed_panels: Option<usize>,
    pub rel_tol: f64,
    pub max_doublings: usize,
    /// Use the 8-point panel rule; `false` selects the 2-point rule, which
    /// makes fixed-panel convergence sweeps informative.
    pub order8: bool,
}

impl Default for RayQuadrature {
    fn default() -> Self {
        Self {
            fixed_panels: None,
            rel_tol: 1e-9,
            max_doublings: 10,
            order8: true,
        }
    }
}

impl RayQuadrature {
    pub fn fixed(panels: usize) -> Self {
        Self {
            fixed_panels: Some(panels.max(1)),
            ..Self::default()
        }
    }

    /// Integrates `f` over `[0, len]`; panel seeding follows the
    /// `diameter/32` rule.
    pub fn integrate(&self, len: f64, diameter: f64, f: impl FnMut(f64) -> f64) -> f64 {
        if len <= 0.0 {
            return 0.0;
        }
        match self.fixed_panels {
            Some(p) => num::gauss_panels(0.0, len, p, self.order8, f),
            None => {
                let seed = ((len / (diameter / 32.0)).ceil() as usize).max(1);
                let (v, _) = num::gauss_adaptive(0.0, len, seed, self.rel_tol, self.max_doublings, f);
                v
            }
        }
    }
}

/// Exponential-shift selection for the Neumann solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Shift {
    /// Smallest value in `{1, 2, 4, 8, ...}` whose contraction certificate
    /// is at most 0.5.
    Auto,
    Fixed(f64),
}

/// Configuration of the Neumann-series solver.
#[derive(Debug, Clone, Serialize)]
pub struct SolverConfig {
    pub shift: Shift,
    pub max_terms: usize,
    /// Series tolerance: absolute L2 norm of the increment.
    pub tolerance: f64,
    pub ray: RayQuadrature,
    /// Lift damping `lambda >= 0`; the Neumann path uses `lambda = 0`.
    pub lift_lambda: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            shift: Shift::Auto,
            max_terms: 64,
            tolerance: 1e-8,
            ray: RayQuadrature::default(),
            lift_lambda: 0.0,
        }
    }
}

/// Solver output: norms, contraction data and the a-priori check pair.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub solver: String,
    pub shift: f64,
    pub terms_used: usize,
    pub converged: bool,
    /// L2 norms of the Neumann increments (a single entry for explicit
    /// solvers).
    pub term_norms: Vec<f64>,
    /// Contraction certificate: `sqrt((a d + m(I)) / (a (aC + Sigma)))`
    /// times the kernel Schur norm.
    pub contraction_certificate: Option<f64>,
    /// Largest observed increment ratio.
    pub observed_ratio: Option<f64>,
    /// RMS residual of the original equation at interior probe points.
    pub residual_l2: f64,
    /// A-priori pair: solution norm and data norm `||f|| + ||g||`.
    pub psi_l2: f64,
    pub data_norm: f64,
    /// `psi_l2 / data_norm` (the regression invariant for the a-priori
    /// estimate scaffold).
    pub apriori_ratio: f64,
    /// Inflow trace norm of `K2 (L_- g_C)`, reported instead of enforcing
    /// the kernel-trace vanishing condition.
    pub k2_lift_trace: Option<f64>,
}

/// Optical depth `int_0^len Sigma(x - s w, w, E) ds`.
fn optical_depth(
    sigma: &Coefficient,
    x: V3,
    omega: V3,
    e: f64,
    len: f64,
    ray: &RayQuadrature,
    diameter: f64,
) -> f64 {
    match sigma {
        Coefficient::Const(v) => v * len,
        Coefficient::Fn(f) => ray.integrate(len, diameter, |s| f(num::axpy(-s, omega, x), omega, e)),
    }
}

/// Explicit solution of the convection-scattering problem
/// `w . grad psi + Sigma psi = f`, `psi|_{Gamma_-} = g`:
///
/// `psi = int_0^{t(x,w)} e^{-int_0^t Sigma} f(x - t w, w, E) dt
///      + e^{-int_0^{t(x,w)} Sigma} g(x - t(x,w) w, w, E)`.
pub fn solve_conv_scatter(
    domain: &ConvexDomain,
    sigma: Coefficient,
    f: PhaseField,
    g: BoundaryField,
    ray: RayQuadrature,
) -> PhaseField {
    let domain = domain.clone();
    let diameter = domain.diameter();
    PhaseField::closure("conv_scatter", move |x, omega, e| {
        let t = domain
            .escape_time(x, omega)
            .expect("evaluation point must lie in the domain closure");
        let source = ray.integrate(t, diameter, |tp| {
            let depth = optical_depth(&sigma, x, omega, e, tp, &ray, diameter);
            (-depth).exp() * f.eval(num::axpy(-tp, omega, x), omega, e)
        });
        let depth_full = optical_depth(&sigma, x, omega, e, t, &ray, diameter);
        let inflow = (-depth_full).exp() * g.eval(num::axpy(-t, omega, x), omega, e);
        source + inflow
    })
}

/// `Sigma` restricted to `(x, omega)` (energy-independent), as required by
/// the CSDA explicit formula.
#[derive(Clone)]
pub enum SigmaXw {
    Const(f64),
    Fn(Arc<dyn Fn(V3, V3) -> f64 + Send + Sync>),
}

impl SigmaXw {
    pub fn eval(&self, x: V3, omega: V3) -> f64 {
        match self {
            SigmaXw::Const(v) => *v,
            SigmaXw::Fn(f) => f(x, omega),
        }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self {
            SigmaXw::Const(v) => Some(*v),
            SigmaXw::Fn(_) => None,
        }
    }

    fn depth(&self, x: V3, omega: V3, len: f64, ray: &RayQuadrature, diameter: f64) -> f64 {
        match self {
            SigmaXw::Const(v) => v * len,
            SigmaXw::Fn(f) => ray.integrate(len, diameter, |s| f(num::axpy(-s, omega, x), omega)),
        }
    }
}

/// Heaviside step with the standard threshold at zero.
#[inline]
fn heaviside(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Explicit solution of the CSDA problem
/// `-(a psi)_E + w . grad psi + Sigma psi = f`, `psi|_{Gamma_-} = g`,
/// `psi(., ., Em) = 0`, for `a = a(E) >= kappa > 0` and `Sigma = Sigma(x, w)`.
///
/// Uses the range map `R(E) = int_0^E 1/a` and evaluates
///
/// `psi_1 = (1/a(E)) int_0^{min(r_m - R(E), t)} e^{-int_0^s Sigma}
///          a(R^{-1}(R(E)+s)) f(x - s w, w, R^{-1}(R(E)+s)) ds`
/// `psi_2 = (1/a(E)) H(r_m - R(E) - t) e^{-int_0^t Sigma}
///          a(R^{-1}(R(E)+t)) g(x - t w, w, R^{-1}(R(E)+t))`.
///
/// Fails with a compatibility error when `g(., ., Em)` is not zero within
/// `compat_tol` in `T^2(Gamma'_-)`.
pub fn solve_csda_explicit(
    domain: &ConvexDomain,
    a: StoppingPower,
    sigma: SigmaXw,
    f: PhaseField,
    g: BoundaryField,
    interval: EnergyInterval,
    ray: RayQuadrature,
    compat_tol: f64,
) -> Result<PhaseField> {
    let rm = Arc::new(range_map(&a, interval, 256)?);
    // Zero-order compatibility: g at the cut-off energy must vanish.
    let quad = BoundaryQuadrature::new(domain, 16, 8)?;
    let defect = trace_slice_norm(&quad, |y, w| g.eval(y, w, interval.max));
    if defect > compat_tol {
        return Err(Error::Compatibility {
            defect,
            tolerance: compat_tol,
        });
    }
    let domain = domain.clone();
    let diameter = domain.diameter();
    Ok(PhaseField::closure("csda_explicit", move |x, omega, e| {
        let t = domain
            .escape_time(x, omega)
            .expect("evaluation point must lie in the domain closure");
        let a_e = a.eval(e);
        let r_e = rm.range(e);
        let budget = rm.r_max - r_e;
        let upper = budget.min(t);
        let psi1 = if upper > 0.0 {
            ray.integrate(upper, diameter, |s| {
                let depth = sigma.depth(x, omega, s, &ray, diameter);
                let e_s = rm.inverse(r_e + s);
                (-depth).exp() * a.eval(e_s) * f.eval(num::axpy(-s, omega, x), omega, e_s)
            }) / a_e
        } else {
            0.0
        };
        let psi2 = if heaviside(budget - t) > 0.0 {
            let depth = sigma.depth(x, omega, t, &ray, diameter);
            let e_t = rm.inverse(r_e + t);
            (-depth).exp() * a.eval(e_t) * g.eval(num::axpy(-t, omega, x), omega, e_t) / a_e
        } else {
            0.0
        };
        psi1 + psi2
    }))
}

/// Lift of inflow data along characteristics:
/// `(L_- g)(x, w, E) = e^{-lambda t(x, w)} g(x - t(x, w) w, w, E)`.
pub fn lift_inflow(domain: &ConvexDomain, g: BoundaryField, lambda: f64) -> PhaseField {
    let domain = domain.clone();
    PhaseField::closure("lift", move |x, omega, e| {
        let t = domain
            .escape_time(x, omega)
            .expect("evaluation point must lie in the domain closure");
        (-lambda * t).exp() * g.eval(num::axpy(-t, omega, x), omega, e)
    })
}

/// Inverse of the shifted differential part with homogeneous inflow/initial
/// data:
///
/// `(P_{C,0}^{-1} h)(x, w, E) = int_0^{min(eta(E), t(x,w))}
///     e^{-(aC) s - int_0^s Sigma(x - r w, w) dr} h(x - s w, w, E + a s) ds`
///
/// with `eta(E) = (Em - E)/a`. For constant `Sigma` the exponent is
/// `-(aC + Sigma) s`. The output vanishes on `Gamma_-` and at `E = Em` by
/// construction.
pub fn p_inverse(
    domain: &ConvexDomain,
    a: f64,
    sigma: SigmaXw,
    c_shift: f64,
    h: PhaseField,
    interval: EnergyInterval,
    ray: RayQuadrature,
) -> Result<PhaseField> {
    if a <= 0.0 {
        return Err(Error::InvalidArgument("stopping power a must be positive".into()));
    }
    if c_shift < 0.0 {
        return Err(Error::InvalidArgument("shift C must be nonnegative".into()));
    }
    let domain = domain.clone();
    let diameter = domain.diameter();
    Ok(PhaseField::closure("p_inverse", move |x, omega, e| {
        let t = domain
            .escape_time(x, omega)
            .expect("evaluation point must lie in the domain closure");
        let eta = (interval.max - e) / a;
        let upper = eta.min(t);
        if upper <= 0.0 {
            return 0.0;
        }
        match &sigma {
            SigmaXw::Const(s0) => {
                let beta = a * c_shift + s0;
                ray.integrate(upper, diameter, |s| {
                    (-beta * s).exp() * h.eval(num::axpy(-s, omega, x), omega, e + a * s)
                })
            }
            SigmaXw::Fn(_) => ray.integrate(upper, diameter, |s| {
                let depth = a * c_shift * s + sigma.depth(x, omega, s, &ray, diameter);
                (-depth).exp() * h.eval(num::axpy(-s, omega, x), omega, e + a * s)
            }),
        }
    }))
}

/// Shifted source assembly for the Neumann iteration:
///
/// `fbar_C = f_C + a d(L_- g_C)/dE - (C a + Sigma) (L_- g_C) + K2 (L_- g_C)`
///
/// with `f_C = e^{CE} f`, `g_C = e^{CE} g` and the undamped lift. The K2
/// term is evaluated pointwise from the model when present; `grid` supplies
/// its sphere quadrature.
pub fn assemble_fbar(
    domain: &ConvexDomain,
    model: &CollisionModel,
    a: f64,
    sigma: f64,
    f: &PhaseField,
    g: &BoundaryField,
    c_shift: f64,
    grid: &Arc<PhaseGrid>,
) -> PhaseField {
    let interval = grid.interval;
    let lift = lift_inflow(domain, g.clone(), 0.0);
    let g_arc = g.clone();
    let domain = domain.clone();
    let f = f.clone();
    let model = model.clone();
    let grid = grid.clone();
    PhaseField::closure("fbar", move |x, omega, e| {
        let shift = (c_shift * e).exp();
        let t = domain
            .escape_time(x, omega)
            .expect("evaluation point must lie in the domain closure");
        let y = num::axpy(-t, omega, x);
        // d/dE of (L_- g_C) = L_-(e^{CE} (C g + dg/dE)); the lift commutes
        // with the energy derivative because t does not depend on E.
        let g_val = g_arc.eval(y, omega, e);
        let dg = g_arc.d_energy(y, omega, e, interval);
        let lift_gc = shift * g_val;
        let dlift_gc = shift * (c_shift * g_val + dg);
        let mut v = shift * f.eval(x, omega, e) + a * dlift_gc - (c_shift * a + sigma) * lift_gc;
        if model.has_kernel(CollisionKernel::K2) {
            let lift_c = {
                let lift = lift.clone();
                PhaseField::closure("lift_gc", move |xx, ww, ee| {
                    (c_shift * ee).exp() * lift.eval(xx, ww, ee)
                })
            };
            v += model
                .apply_kernel_at(CollisionKernel::K2, &grid, &lift_c, x, omega, e)
                .unwrap_or(0.0);
        }
        v
    })
}

/// Samples `p_inverse` of a field onto the grid (the Neumann work step).
fn p_inverse_sampled(
    domain: &ConvexDomain,
    a: f64,
    sigma: f64,
    c_shift: f64,
    h: &PhaseField,
    grid: &Arc<PhaseGrid>,
    ray: &RayQuadrature,
) -> Result<PhaseField> {
    let beta = a * c_shift + sigma;
    let diameter = domain.diameter();
    let interval = grid.interval;
    let n_w = grid.sphere.len();
    let n_e = grid.energies.len();
    let values: Vec<f64> = grid
        .spatial
        .par_iter()
        .flat_map_iter(|sn| {
            let mut chunk = Vec::with_capacity(n_w * n_e);
            for iw in 0..n_w {
                let omega = grid.sphere.nodes[iw];
                let t = domain
                    .escape_time(sn.position, omega)
                    .expect("grid nodes lie inside the domain");
                for ie in 0..n_e {
                    let e = grid.energies[ie];
                    let upper = ((interval.max - e) / a).min(t);
                    let v = if upper <= 0.0 {
                        0.0
                    } else {
                        ray.integrate(upper, diameter, |s| {
                            (-beta * s).exp()
                                * h.eval(num::axpy(-s, omega, sn.position), omega, e + a * s)
                        })
                    };
                    chunk.push(v);
                }
            }
            chunk
        })
        .collect();
    PhaseField::sampled(grid.clone(), values, "p_inverse_term")
}

/// Contraction certificate of the shifted iteration:
/// `sqrt((a d + m(I)) / (a (a C + Sigma)))` times the kernel Schur norm.
pub fn contraction_certificate(
    a: f64,
    sigma: f64,
    c_shift: f64,
    diameter: f64,
    interval: EnergyInterval,
    kernel_norm: f64,
) -> f64 {
    ((a * diameter + interval.measure()) / (a * (a * c_shift + sigma))).sqrt() * kernel_norm
}

/// Neumann-series solution of
/// `-a psi_E + w . grad psi + Sigma psi - K2 psi = f`,
/// `psi|_{Gamma_-} = g`, `psi(., ., Em) = 0` with constant `a, Sigma > 0`.
///
/// Iterates `phi = sum_k (P^{-1} K2)^k (P^{-1} fbar_C) + L_- g_C` and maps
/// back by `psi = e^{-CE} phi`.
pub fn neumann_solve(
    domain: &ConvexDomain,
    model: &CollisionModel,
    f: &PhaseField,
    g: &BoundaryField,
    grid: &Arc<PhaseGrid>,
    config: &SolverConfig,
) -> Result<(PhaseField, SolveReport)> {
    let interval = grid.interval;
    let a = model
        .stopping
        .as_ref()
        .and_then(|s| s.constant_value())
        .ok_or_else(|| Error::Configuration("neumann solver requires constant stopping power".into()))?;
    let sigma = model
        .sigma_t
        .as_ref()
        .and_then(|s| s.constant_value())
        .ok_or_else(|| Error::Configuration("neumann solver requires constant Sigma".into()))?;
    if a <= 0.0 || sigma <= 0.0 {
        return Err(Error::Configuration(
            "neumann solver requires a > 0 and Sigma > 0".into(),
        ));
    }
    if model.has_kernel(CollisionKernel::K1) || model.has_kernel(CollisionKernel::K3) {
        return Err(Error::Configuration(
            "neumann solver supports the angle-local kernel K2 only".into(),
        ));
    }

    // Zero-order compatibility.
    let quad = BoundaryQuadrature::new(domain, 16, 8)?;
    let defect = trace_slice_norm(&quad, |y, w| g.eval(y, w, interval.max));
    let compat_tol = 1e-8 * (1.0 + trace_slice_norm(&quad, |y, w| g.eval(y, w, interval.min)));
    if defect > compat_tol.max(1e-8) {
        return Err(Error::Compatibility {
            defect,
            tolerance: compat_tol.max(1e-8),
        });
    }

    // Kernel Schur norm (L2 certificate), zero when no kernel is present.
    let kernel_norm = if model.has_kernel(CollisionKernel::K2) {
        crate::physics::schur_bounds(model, CollisionKernel::K2, grid, 2000, 1234)?.certificate
    } else {
        0.0
    };

    let diameter = domain.diameter();
    let c_shift = match config.shift {
        Shift::Fixed(c) => {
            if c < 0.0 {
                return Err(Error::InvalidArgument("shift C must be nonnegative".into()));
            }
            c
        }
        Shift::Auto => {
            let mut chosen = None;
            let mut cert_at_max = f64::INFINITY;
            for k in 0..=20u32 {
                let c = (1u64 << k) as f64;
                let cert =
                    contraction_certificate(a, sigma, c, diameter, interval, kernel_norm);
                cert_at_max = cert;
                if cert <= 0.5 {
                    chosen = Some(c);
                    break;
                }
            }
            match chosen {
                Some(c) => c,
                None => {
                    return Err(Error::NonContraction {
                        certificate: cert_at_max,
                        max_shift: (1u64 << 20) as f64,
                    })
                }
            }
        }
    };
    let certificate =
        contraction_certificate(a, sigma, c_shift, diameter, interval, kernel_norm);

    // Shifted data and the lift.
    let g_c = {
        let g1 = g.clone();
        let g2 = g.clone();
        let iv = interval;
        let mut out =
            BoundaryField::new("g_C", move |y, w, e| (c_shift * e).exp() * g1.eval(y, w, e));
        out.d_energy = Some(Arc::new(move |y, w, e| {
            (c_shift * e).exp() * (c_shift * g2.eval(y, w, e) + g2.d_energy(y, w, e, iv))
        }));
        out
    };
    let lift_gc = lift_inflow(domain, g_c, 0.0);
    let fbar = assemble_fbar(domain, model, a, sigma, f, g, c_shift, grid);

    // Inflow trace diagnostic of K2 (L_- g_C) in place of the kernel-trace
    // vanishing condition.
    let k2_lift_trace = if model.has_kernel(CollisionKernel::K2) {
        let lift_field = lift_gc.clone();
        let model_c = model.clone();
        let grid_c = grid.clone();
        let diag = BoundaryField::new("k2 lift trace", move |y, w, e| {
            model_c
                .apply_kernel_at(CollisionKernel::K2, &grid_c, &lift_field, y, w, e)
                .unwrap_or(0.0)
        });
        Some(trace_norm(
            domain,
            &quad,
            (&grid.energies, grid.energy_weight),
            &diag,
            TraceWeight::Unit,
        )?)
    } else {
        None
    };

    // Series accumulation on the grid.
    let mut term = p_inverse_sampled(domain, a, sigma, c_shift, &fbar, grid, &config.ray)?
        .values()
        .unwrap()
        .to_vec();
    let mut acc = term.clone();
    let mut term_norms = vec![l2_of_samples(grid, &term)];
    let mut converged = term_norms[0] < config.tolerance;
    let mut observed_ratio: Option<f64> = None;
    let mut terms_used = 1;
    if model.has_kernel(CollisionKernel::K2) {
        while !converged && terms_used < config.max_terms {
            let term_field = PhaseField::sampled(grid.clone(), term.clone(), "term")?;
            let k_term = model.apply_collision(CollisionKernel::K2, grid, &term_field)?;
            let next = p_inverse_sampled(domain, a, sigma, c_shift, &k_term, grid, &config.ray)?
                .values()
                .unwrap()
                .to_vec();
            let norm = l2_of_samples(grid, &next);
            let prev = *term_norms.last().unwrap();
            if prev > 0.0 {
                let r = norm / prev;
                observed_ratio = Some(observed_ratio.map_or(r, |o: f64| o.max(r)));
            }
            for (u, v) in acc.iter_mut().zip(&next) {
                *u += v;
            }
            term_norms.push(norm);
            term = next;
            terms_used += 1;
            converged = norm < config.tolerance;
        }
    } else {
        converged = true;
    }
    if !converged {
        return Err(Error::SeriesConvergence {
            terms: terms_used,
            last_increment: *term_norms.last().unwrap(),
        });
    }

    let u_field = PhaseField::sampled(grid.clone(), acc, "u")?;
    let psi = {
        let u = u_field.clone();
        let lift = lift_gc.clone();
        PhaseField::closure("neumann_psi", move |x, w, e| {
            (-c_shift * e).exp() * (u.eval(x, w, e) + lift.eval(x, w, e))
        })
    };

    // Report block: residual probe, a-priori pair.
    let residual_l2 = residual_rms(domain, model, &psi, f, grid, 200, 97)?;
    let psi_l2 = l2_norm(grid, &psi)?;
    let g_norm = trace_norm(
        domain,
        &quad,
        (&grid.energies, grid.energy_weight),
        g,
        TraceWeight::Unit,
    )?;
    let f_norm = l2_norm(grid, f)?;
    let data_norm = f_norm + g_norm;
    let report = SolveReport {
        solver: "neumann".into(),
        shift: c_shift,
        terms_used,
        converged,
        term_norms,
        contraction_certificate: Some(certificate),
        observed_ratio,
        residual_l2,
        psi_l2,
        data_norm,
        apriori_ratio: if data_norm > 0.0 {
            psi_l2 / data_norm
        } else {
            0.0
        },
        k2_lift_trace,
    };
    Ok((psi, report))
}

fn l2_of_samples(grid: &PhaseGrid, values: &[f64]) -> f64 {
    let n_w = grid.sphere.len();
    let n_e = grid.energies.len();
    let mut vals = Vec::with_capacity(values.len());
    for (ix, sn) in grid.spatial.iter().enumerate() {
        for iw in 0..n_w {
            let ww = grid.sphere.weights[iw];
            for ie in 0..n_e {
                let v = values[grid.index(ix, iw, ie)];
                vals.push(sn.weight * ww * grid.energy_weight * v * v);
            }
        }
    }
    num::pairwise_sum(&vals).sqrt()
}

/// Sign convention of the energy term in the transport operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyForm {
    /// `+ a dpsi/dE` (the full-equation form).
    Advection,
    /// `- d(a psi)/dE` (the CSDA form; equals `-a dpsi/dE` for constant `a`).
    ConservativeNegative,
}

/// Pointwise application of the transport operator
/// `T psi = [energy term] + c Lap_S psi + d . grad_S psi + w . grad_x psi
///          + Sigma psi - K_r psi`
/// by finite differences; used for residuals and manufactured solutions.
pub fn apply_transport_operator(
    domain: &ConvexDomain,
    model: &CollisionModel,
    field: &PhaseField,
    grid: &Arc<PhaseGrid>,
    form: EnergyForm,
    x: V3,
    omega: V3,
    e: f64,
) -> Result<f64> {
    let diameter = domain.diameter();
    let interval = grid.interval;
    let h_x = 1e-5 * diameter;
    // Directional derivative along omega.
    let xp = num::axpy(h_x, omega, x);
    let xm = num::axpy(-h_x, omega, x);
    if !domain.inside(xp) || !domain.inside(xm) {
        return Err(Error::BoundaryStencil { point: x });
    }
    let advect = (field.eval(xp, omega, e) - field.eval(xm, omega, e)) / (2.0 * h_x);

    let mut value = advect + model.sigma_t_at(x, omega, e) * field.eval(x, omega, e);

    if let Some(a) = &model.stopping {
        let h_e = 1e-5 * interval.measure();
        let de = {
            let ep = (e + h_e).min(interval.max);
            let em = (e - h_e).max(interval.min);
            (field.eval(x, omega, ep) - field.eval(x, omega, em)) / (ep - em)
        };
        match form {
            EnergyForm::Advection => value += a.eval(e) * de,
            EnergyForm::ConservativeNegative => {
                let h = 1e-5 * interval.measure();
                let da = (a.eval((e + h).min(interval.max)) - a.eval((e - h).max(interval.min)))
                    / ((e + h).min(interval.max) - (e - h).max(interval.min));
                value += -a.eval(e) * de - da * field.eval(x, omega, e);
            }
        }
    }

    if model.c_diffusion.is_some() || model.d_drift.is_some() {
        let fw = |w: V3| field.eval(x, w, e);
        let d = sphere_derivatives_at(&fw, omega, 1e-4);
        if let Some(c) = &model.c_diffusion {
            value += c(x, e) * d.laplacian;
        }
        if let Some(dd) = &model.d_drift {
            let coeffs = dd(x, omega, e);
            value += coeffs[0] * d.grad[0] + coeffs[1] * d.grad[1];
        }
    }

    for kernel in [CollisionKernel::K1, CollisionKernel::K2, CollisionKernel::K3] {
        if model.has_kernel(kernel) {
            value -= model.apply_kernel_at(kernel, grid, field, x, omega, e)?;
        }
    }
    Ok(value)
}

/// RMS residual `T psi - f` over seeded random interior probe points,
/// excluding grazing rays where the FD directional derivative is unreliable.
pub fn residual_rms(
    domain: &ConvexDomain,
    model: &CollisionModel,
    psi: &PhaseField,
    f: &PhaseField,
    grid: &Arc<PhaseGrid>,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = domain.diameter() / 2.0;
    let interval = grid.interval;
    let mut vals = Vec::with_capacity(probes);
    let mut attempts = 0;
    while vals.len() < probes && attempts < probes * 50 {
        attempts += 1;
        let x = [
            rng.gen_range(-0.9 * radius..0.9 * radius),
            rng.gen_range(-0.9 * radius..0.9 * radius),
            rng.gen_range(-0.9 * radius..0.9 * radius),
        ];
        if !domain.inside(x) || domain.level(x) < 0.05 * radius {
            continue;
        }
        let omega = crate::phase::random_unit(&mut rng);
        let margin = 0.1 * interval.measure();
        let e = rng.gen_range(interval.min + margin..interval.max - margin);
        let form = if model.stopping.is_some() {
            EnergyForm::ConservativeNegative
        } else {
            EnergyForm::Advection
        };
        let t = apply_transport_operator(domain, model, psi, grid, form, x, omega, e)?;
        let r = t - f.eval(x, omega, e);
        vals.push(r * r);
    }
    if vals.is_empty() {
        return Err(Error::Resolution("no admissible residual probes".into()));
    }
    Ok((num::pairwise_sum(&vals) / vals.len() as f64).sqrt())
}

/// Manufactured smooth solution with analytic data for solver verification:
/// `psi* = (Em - E) exp(alpha x1) (1 + b w3)` with the compatible data pair
/// `(f, g)` for the CSDA-with-K2 equation.
pub struct Manufactured {
    pub psi: PhaseField,
    pub f: PhaseField,
    pub g: BoundaryField,
}

/// Builds the manufactured triple for constant `a`, `Sigma` and an optional
/// constant-kernel `K2 = 4 pi c0` applied to the direction-averaged part.
pub fn manufactured_solution(
    a: f64,
    sigma: f64,
    k2_c0: f64,
    alpha: f64,
    b: f64,
    interval: EnergyInterval,
) -> Manufactured {
    let em = interval.max;
    let psi_fn = move |x: V3, w: V3, e: f64| (em - e) * (alpha * x[0]).exp() * (1.0 + b * w[2]);
    let psi = PhaseField::closure("manufactured", psi_fn);
    // T psi = -a dpsi/dE + w.grad psi + Sigma psi - K2 psi, all closed form:
    // dpsi/dE = -exp(alpha x1)(1 + b w3)
    // w.grad psi = alpha w1 psi
    // K2 psi = c0 int psi dw' = c0 4 pi (Em - E) exp(alpha x1)  (w-average kills b w3)
    let f = PhaseField::closure("manufactured_f", move |x: V3, w: V3, e: f64| {
        let base = (alpha * x[0]).exp();
        let p = psi_fn(x, w, e);
        a * base * (1.0 + b * w[2]) + alpha * w[0] * p + sigma * p
            - k2_c0 * 4.0 * PI * (em - e) * base
    });
    let g = BoundaryField::new("manufactured_g", move |y: V3, w: V3, e: f64| {
        psi_fn(y, w, e)
    })
    .with_d_energy(move |y: V3, w: V3, _e: f64| -(alpha * y[0]).exp() * (1.0 + b * w[2]));
    Manufactured { psi, f, g }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::inner_product;

    fn ball() -> ConvexDomain {
        ConvexDomain::unit_ball()
    }

    fn grid(n_x: usize, n_w: (usize, usize), n_e: usize) -> Arc<PhaseGrid> {
        Arc::new(
            PhaseGrid::new(
                &ball(),
                n_x,
                n_w.0,
                n_w.1,
                n_e,
                EnergyInterval::new(0.0, 1.0).unwrap(),
            )
            .unwrap(),
        )
    }

    fn escape_field() -> PhaseField {
        let b = ball();
        PhaseField::closure("1-exp(-t)", move |x, w, _| {
            1.0 - (-b.escape_time(x, w).unwrap()).exp()
        })
    }

    #[test]
    fn conv_scatter_reproduces_escape_solution() {
        let psi = solve_conv_scatter(
            &ball(),
            Coefficient::Const(1.0),
            PhaseField::constant(1.0),
            BoundaryField::zero(),
            RayQuadrature::default(),
        );
        let exact = escape_field();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = loop {
                let c = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                if num::norm(c) < 0.99 {
                    break c;
                }
            };
            let w = crate::phase::random_unit(&mut rng);
            let a = psi.eval(x, w, 0.5);
            let b = exact.eval(x, w, 0.5);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_scatter_transports_constant_inflow() {
        let psi = solve_conv_scatter(
            &ball(),
            Coefficient::Const(0.0),
            PhaseField::constant(0.0),
            BoundaryField::constant(3.5),
            RayQuadrature::default(),
        );
        for (x, w) in [
            ([0.3, -0.2, 0.1], [1.0, 0.0, 0.0]),
            ([0.0; 3], [0.0, 1.0, 0.0]),
        ] {
            assert!((psi.eval(x, w, 0.2) - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_scatter_manufactured_linear() {
        // psi* = x1, Sigma = 1 => f = w1 + x1, g = y1 on the inflow set.
        let f = PhaseField::closure("f", |x, w, _| w[0] + x[0]);
        let g = BoundaryField::new("g", |y: V3, _: V3, _| y[0]);
        let psi = solve_conv_scatter(&ball(), Coefficient::Const(1.0), f, g, RayQuadrature::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            let w = crate::phase::random_unit(&mut rng);
            assert!((psi.eval(x, w, 0.5) - x[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_scatter_trace_equals_inflow_data() {
        let g = BoundaryField::new("g", |y: V3, w: V3, _| 1.0 + y[0] + 0.2 * w[2]);
        let psi = solve_conv_scatter(
            &ball(),
            Coefficient::Const(0.7),
            PhaseField::constant(0.4),
            g.clone(),
            RayQuadrature::default(),
        );
        // On the inflow boundary t = 0, so psi = g.
        let y = [-1.0, 0.0, 0.0];
        let w = [1.0, 0.0, 0.0];
        assert!((psi.eval(y, w, 0.1) - g.eval(y, w, 0.1)).abs() < 1e-9);
    }

    #[test]
    fn csda_constant_reduction() {
        // a = 1, Sigma = 0, f = 1, g = 0: psi = min(Em - E, t).
        let psi = solve_csda_explicit(
            &ball(),
            StoppingPower::Const(1.0),
            SigmaXw::Const(0.0),
            PhaseField::constant(1.0),
            BoundaryField::zero(),
            EnergyInterval::new(0.0, 1.0).unwrap(),
            RayQuadrature::default(),
            1e-9,
        )
        .unwrap();
        let b = ball();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = [
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
            ];
            if !b.inside(x) {
                continue;
            }
            let w = crate::phase::random_unit(&mut rng);
            let e: f64 = rng.gen_range(0.0..1.0);
            let t = b.escape_time(x, w).unwrap();
            let expect = (1.0 - e).min(t);
            let got = psi.eval(x, w, e);
            assert!((got - expect).abs() < 1e-7, "{got} vs {expect}");
        }
    }

    #[test]
    fn csda_zero_data_gives_zero() {
        let psi = solve_csda_explicit(
            &ball(),
            StoppingPower::Const(1.0),
            SigmaXw::Const(0.5),
            PhaseField::constant(0.0),
            BoundaryField::zero(),
            EnergyInterval::new(0.0, 1.0).unwrap(),
            RayQuadrature::default(),
            1e-9,
        )
        .unwrap();
        assert_eq!(psi.eval([0.2, 0.0, 0.0], [1.0, 0.0, 0.0], 0.3), 0.0);
    }

    #[test]
    fn csda_manufactured_energy_ramp() {
        // psi* = Em - E with a = 1, Sigma = 0: f = 1, g = (Em - E) on Gamma_-.
        let em = 1.0;
        let g = BoundaryField::new("g", move |_, _, e| em - e)
            .with_d_energy(|_, _, _| -1.0);
        let psi = solve_csda_explicit(
            &ball(),
            StoppingPower::Const(1.0),
            SigmaXw::Const(0.0),
            PhaseField::constant(1.0),
            g,
            EnergyInterval::new(0.0, em).unwrap(),
            RayQuadrature::default(),
            1e-9,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            let w = crate::phase::random_unit(&mut rng);
            let e = rng.gen_range(0.0..em);
            let got = psi.eval(x, w, e);
            assert!((got - (em - e)).abs() < 1e-7, "{got} vs {}", em - e);
        }
        // Terminal condition.
        assert!(psi.eval([0.1, 0.0, 0.0], [1.0, 0.0, 0.0], em).abs() < 1e-9);
    }

    #[test]
    fn csda_compatibility_violation_detected() {
        let err = solve_csda_explicit(
            &ball(),
            StoppingPower::Const(1.0),
            SigmaXw::Const(0.0),
            PhaseField::constant(1.0),
            BoundaryField::constant(1.0),
            EnergyInterval::new(0.0, 1.0).unwrap(),
            RayQuadrature::default(),
            1e-6,
        )
        .expect_err("g(Em) != 0 must be rejected");
        assert!(matches!(err, Error::Compatibility { .. }));
    }

    #[test]
    fn lift_constant_and_damped() {
        let one = lift_inflow(&ball(), BoundaryField::constant(1.0), 0.0);
        assert!((one.eval([0.3, 0.1, -0.2], [0.0, 1.0, 0.0], 0.5) - 1.0).abs() < 1e-12);
        let damped = lift_inflow(&ball(), BoundaryField::constant(1.0), 1.0);
        let b = ball();
        let (x, w) = ([0.2, -0.1, 0.4], [0.0, 0.0, 1.0]);
        let t = b.escape_time(x, w).unwrap();
        assert!((damped.eval(x, w, 0.5) - (-t).exp()).abs() < 1e-12);
    }

    #[test]
    fn lift_is_constant_along_rays() {
        // For lambda = 0: w . grad (L_- g) = 0, checked by FD along the ray.
        let g = BoundaryField::new("y1", |y: V3, _: V3, _| y[0]);
        let lift = lift_inflow(&ball(), g, 0.0);
        let w = num::normalize([0.3, 0.5, -0.2]);
        let x = [0.1, -0.2, 0.3];
        let h = 1e-5;
        let d = (lift.eval(num::axpy(h, w, x), w, 0.5) - lift.eval(num::axpy(-h, w, x), w, 0.5))
            / (2.0 * h);
        assert!(d.abs() < 1e-7, "directional derivative {d}");
    }

    #[test]
    fn p_inverse_constant_source_closed_form() {
        let (a, sigma, c) = (1.0, 1.0, 2.0);
        let beta = a * c + sigma;
        let interval = EnergyInterval::new(0.0, 1.0).unwrap();
        let u = p_inverse(
            &ball(),
            a,
            SigmaXw::Const(sigma),
            c,
            PhaseField::constant(3.0),
            interval,
            RayQuadrature::default(),
        )
        .unwrap();
        let b = ball();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
            ];
            if !b.inside(x) {
                continue;
            }
            let w = crate::phase::random_unit(&mut rng);
            let e: f64 = rng.gen_range(0.0..1.0);
            let upper = ((1.0 - e) / a).min(b.escape_time(x, w).unwrap());
            let expect = 3.0 / beta * (1.0 - (-beta * upper).exp());
            let got = u.eval(x, w, e);
            assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        }
    }

    #[test]
    fn p_inverse_annihilates_boundary_and_terminal() {
        let interval = EnergyInterval::new(0.0, 1.0).unwrap();
        let u = p_inverse(
            &ball(),
            1.0,
            SigmaXw::Const(1.0),
            1.0,
            PhaseField::closure("h", |x, w, e| 1.0 + x[0] + w[2] * e),
            interval,
            RayQuadrature::default(),
        )
        .unwrap();
        // Inflow boundary: t = 0.
        assert_eq!(u.eval([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.5), 0.0);
        // Terminal energy: eta = 0.
        assert_eq!(u.eval([0.2, 0.1, 0.0], [1.0, 0.0, 0.0], 1.0), 0.0);
    }

    #[test]
    fn p_inverse_lemma_bound_on_random_fields() {
        // a = 1, Sigma = 1, C = 4, unit ball (d = 2), I = [0,1]:
        // ||u|| / ||h|| <= sqrt(3/5).
        let interval = EnergyInterval::new(0.0, 1.0).unwrap();
        let g = grid(10, (8, 6), 6);
        let bound = ((1.0f64 * 2.0 + 1.0) / (1.0 * (1.0 * 4.0 + 1.0))).sqrt();
        for seed in 0..20 {
            let h = crate::physics::random_smooth_field(&g, 700 + seed);
            let u = p_inverse(
                &ball(),
                1.0,
                SigmaXw::Const(1.0),
                4.0,
                h.clone(),
                interval,
                RayQuadrature::default(),
            )
            .unwrap();
            let ratio = l2_norm(&g, &u).unwrap() / l2_norm(&g, &h).unwrap();
            assert!(
                ratio <= bound * 1.01,
                "seed {seed}: ratio {ratio} exceeds bound {bound}"
            );
        }
    }

    #[test]
    fn fbar_reduces_to_shifted_source_without_inflow() {
        let g = grid(6, (6, 4), 4);
        let model = CollisionModel::new();
        let f = PhaseField::closure("f", |x, _, e| x[0] + e);
        let fbar = assemble_fbar(&ball(), &model, 1.0, 1.0, &f, &BoundaryField::zero(), 2.0, &g);
        let (x, w, e) = ([0.2, 0.1, -0.3], [0.0, 0.0, 1.0], 0.4);
        assert!((fbar.eval(x, w, e) - (2.0f64 * e).exp() * f.eval(x, w, e)).abs() < 1e-12);
    }

    #[test]
    fn fbar_hand_evaluated_energy_ramp() {
        // f = 0, Sigma const, K2 = 0, a const, g = Em - E, C = 0:
        // fbar = -a - Sigma (Em - E).
        let g = grid(6, (6, 4), 4);
        let model = CollisionModel::new();
        let (a, sigma, em) = (0.7, 1.3, 1.0);
        let gb =
            BoundaryField::new("g", move |_, _, e| em - e).with_d_energy(|_, _, _| -1.0);
        let fbar = assemble_fbar(&ball(), &model, a, sigma, &PhaseField::constant(0.0), &gb, 0.0, &g);
        let (x, w, e) = ([0.1, -0.2, 0.3], [1.0, 0.0, 0.0], 0.25);
        let expect = -a - sigma * (em - e);
        assert!((fbar.eval(x, w, e) - expect).abs() < 1e-9);
    }

    #[test]
    fn fbar_linearity() {
        let g = grid(6, (6, 4), 4);
        let model = CollisionModel::new().with_constant_k2(0.02);
        let f1 = PhaseField::closure("f1", |x, _, _| x[0]);
        let f2 = PhaseField::closure("f2", |_, w, _| w[2]);
        let gb = BoundaryField::new("g", |y: V3, _: V3, e: f64| y[1] * (1.0 - e))
            .with_d_energy(|y: V3, _: V3, _| -y[1]);
        let combo = {
            let (a, b) = (f1.clone(), f2.clone());
            PhaseField::closure("combo", move |x, w, e| {
                2.0 * a.eval(x, w, e) + 3.0 * b.eval(x, w, e)
            })
        };
        let dom = ball();
        let full = assemble_fbar(&dom, &model, 1.0, 1.0, &combo, &gb, 1.0, &g);
        let part1 = assemble_fbar(&dom, &model, 1.0, 1.0, &f1, &BoundaryField::zero(), 1.0, &g);
        let part2 = assemble_fbar(&dom, &model, 1.0, 1.0, &f2, &BoundaryField::zero(), 1.0, &g);
        let part_g = assemble_fbar(&dom, &model, 1.0, 1.0, &PhaseField::constant(0.0), &gb, 1.0, &g);
        let (x, w, e) = ([0.3, 0.0, -0.1], [0.0, 1.0, 0.0], 0.6);
        let lhs = full.eval(x, w, e);
        let rhs = 2.0 * part1.eval(x, w, e) + 3.0 * part2.eval(x, w, e) + part_g.eval(x, w, e);
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn neumann_series_truncates_without_kernel() {
        let g = grid(8, (8, 6), 6);
        let model = CollisionModel::new()
            .with_sigma_t(Coefficient::Const(1.0))
            .with_stopping(StoppingPower::Const(1.0));
        let f = PhaseField::closure("f", |x, _, e| 1.0 + 0.3 * x[0] + 0.2 * e);
        let (psi, report) = neumann_solve(
            &ball(),
            &model,
            &f,
            &BoundaryField::zero(),
            &g,
            &SolverConfig {
                shift: Shift::Fixed(2.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.terms_used, 1);
        // Equal to e^{-CE} P^{-1} fbar_C pointwise.
        let fbar = assemble_fbar(&ball(), &model, 1.0, 1.0, &f, &BoundaryField::zero(), 2.0, &g);
        let u = p_inverse(
            &ball(),
            1.0,
            SigmaXw::Const(1.0),
            2.0,
            fbar,
            g.interval,
            RayQuadrature::default(),
        )
        .unwrap();
        let (x, w, e) = ([0.2, -0.1, 0.3], g.sphere.nodes[7], g.energies[2]);
        let direct = (-2.0f64 * e).exp() * u.eval(x, w, e);
        let got = psi.eval(x, w, e);
        // The solver samples on the grid; interpolation costs a little.
        assert!((got - direct).abs() < 2e-2 * direct.abs().max(0.1), "{got} vs {direct}");
    }

    #[test]
    fn neumann_increments_contract_within_certificate() {
        let g = grid(8, (8, 6), 6);
        let c0 = 0.05;
        let model = CollisionModel::new()
            .with_sigma_t(Coefficient::Const(1.0))
            .with_stopping(StoppingPower::Const(1.0))
            .with_constant_k2(c0);
        let (_, report) = neumann_solve(
            &ball(),
            &model,
            &PhaseField::constant(1.0),
            &BoundaryField::zero(),
            &g,
            &SolverConfig::default(),
        )
        .unwrap();
        let cert = report.contraction_certificate.unwrap();
        assert!(cert <= 0.5);
        assert!(report.terms_used >= 2);
        for pair in report.term_norms.windows(2) {
            if pair[0] > 1e-14 {
                assert!(
                    pair[1] / pair[0] <= cert * 1.01,
                    "ratio {} vs certificate {cert}",
                    pair[1] / pair[0]
                );
            }
        }
    }

    #[test]
    fn neumann_recovers_manufactured_solution() {
        let g = grid(9, (8, 6), 6);
        let c0 = 0.02;
        let m = manufactured_solution(1.0, 1.0, c0, 0.6, 0.4, g.interval);
        let model = CollisionModel::new()
            .with_sigma_t(Coefficient::Const(1.0))
            .with_stopping(StoppingPower::Const(1.0))
            .with_constant_k2(c0);
        let (psi, report) = neumann_solve(
            &ball(),
            &model,
            &m.f,
            &m.g,
            &g,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(report.converged);
        let diff = {
            let (a, b) = (psi.clone(), m.psi.clone());
            PhaseField::closure("err", move |x, w, e| a.eval(x, w, e) - b.eval(x, w, e))
        };
        let err = l2_norm(&g, &diff).unwrap();
        let norm = l2_norm(&g, &m.psi).unwrap();
        assert!(err / norm < 2e-2, "relative error {}", err / norm);
    }

    #[test]
    fn transport_operator_on_escape_solution() {
        // w.grad psi + psi = 1 for psi = 1 - e^{-t}.
        let g = grid(6, (6, 4), 4);
        let model = CollisionModel::new().with_sigma_t(Coefficient::Const(1.0));
        let psi = escape_field();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x = [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            let w = crate::phase::random_unit(&mut rng);
            let v = apply_transport_operator(
                &ball(),
                &model,
                &psi,
                &g,
                EnergyForm::Advection,
                x,
                w,
                0.5,
            )
            .unwrap();
            assert!((v - 1.0).abs() < 1e-4, "T psi = {v}");
        }
    }

    #[test]
    fn transport_operator_constant_field() {
        let g = grid(6, (6, 4), 4);
        let model = CollisionModel::new().with_sigma_t(Coefficient::Const(2.0));
        let v = apply_transport_operator(
            &ball(),
            &model,
            &PhaseField::constant(3.0),
            &g,
            EnergyForm::Advection,
            [0.1, 0.0, 0.2],
            [0.0, 1.0, 0.0],
            0.5,
        )
        .unwrap();
        assert!((v - 6.0).abs() < 1e-8);
    }

    #[test]
    fn transport_operator_sphere_laplacian() {
        let g = grid(6, (6, 4), 4);
        let mut model = CollisionModel::new();
        model.c_diffusion = Some(Arc::new(|_, _| 1.0));
        let psi = PhaseField::closure("w3", |_, w, _| w[2]);
        let w = num::normalize([0.4, 0.3, 0.85]);
        let v = apply_transport_operator(
            &ball(),
            &model,
            &psi,
            &g,
            EnergyForm::Advection,
            [0.1, 0.0, 0.0],
            w,
            0.5,
        )
        .unwrap();
        assert!((v - (-2.0 * w[2])).abs() < 1e-3, "{v} vs {}", -2.0 * w[2]);
    }

    #[test]
    fn shift_covariance_auto_vs_fixed() {
        let g = grid(8, (8, 6), 6);
        let c0 = 0.03;
        let model = CollisionModel::new()
            .with_sigma_t(Coefficient::Const(1.0))
            .with_stopping(StoppingPower::Const(1.0))
            .with_constant_k2(c0);
        let f = PhaseField::closure("f", |x, _, e| 1.0 + 0.2 * x[1] + 0.1 * e);
        let (psi_auto, report_auto) = neumann_solve(
            &ball(),
            &model,
            &f,
            &BoundaryField::zero(),
            &g,
            &SolverConfig::default(),
        )
        .unwrap();
        let (psi_fixed, _) = neumann_solve(
            &ball(),
            &model,
            &f,
            &BoundaryField::zero(),
            &g,
            &SolverConfig {
                shift: Shift::Fixed(2.0 * report_auto.shift),
                ..Default::default()
            },
        )
        .unwrap();
        let diff = {
            let (a, b) = (psi_auto.clone(), psi_fixed.clone());
            PhaseField::closure("diff", move |x, w, e| a.eval(x, w, e) - b.eval(x, w, e))
        };
        let rel = l2_norm(&g, &diff).unwrap() / l2_norm(&g, &psi_auto).unwrap();
        assert!(rel < 2e-2, "solutions differ by {rel}");
    }

    #[test]
    fn apriori_pair_is_reported() {
        let g = grid(8, (8, 6), 6);
        let model = CollisionModel::new()
            .with_sigma_t(Coefficient::Const(1.0))
            .with_stopping(StoppingPower::Const(1.0));
        let (_, report) = neumann_solve(
            &ball(),
            &model,
            &PhaseField::constant(1.0),
            &BoundaryField::zero(),
            &g,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(report.psi_l2 > 0.0);
        assert!(report.data_norm > 0.0);
        assert!(report.apriori_ratio > 0.0);
        let one = PhaseField::constant(1.0);
        let n = inner_product(&g, &one, &one).unwrap().sqrt();
        assert!((report.data_norm - n).abs() / n < 0.3);
    }
}
