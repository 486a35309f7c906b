//! Deterministic transport toolkit for a continuous-slowing-down linear
//! Boltzmann equation on convex domains.
//!
//! The crate is organized around six subsystems:
//!
//! - [`geometry`]: convex-domain geometry oracle — escape times and their
//!   derivatives, outward normals, sphere charts, boundary quadrature and
//!   the ball rectification chart.
//! - [`phase`]: tensor-product discretization of `G x S x I`, field storage
//!   and evaluation, and every norm/seminorm the solvers and diagnostics
//!   use (L2, trace, weighted trace, anisotropic Sobolev, fractional).
//! - [`physics`]: collision coefficients and kernels, the elastic scattering
//!   circle, screened Rutherford cross section, Schur operator bounds,
//!   coercivity margins and the CSDA range map.
//! - [`solvers`]: explicit solution formulas along characteristics and the
//!   Neumann-series solver for the full equation with angle-local
//!   scattering.
//! - [`diagnostics`]: regularity probes and identity checks — boundary
//!   weights, tangential fields, convergence-criterion integrals,
//!   derivative decompositions, compatibility checks.
//! - [`verify`]: the machine-readable verification suites driven by the CLI.
//!
//! All operations are pure functions of immutable inputs. Quadrature sums
//! use a fixed-order pairwise reduction so results are bit-stable across
//! thread counts.

pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod num;
pub mod phase;
pub mod physics;
pub mod solvers;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{BoundaryQuadrature, ConvexDomain, SphereChart};
pub use phase::{BoundaryField, EnergyInterval, PhaseField, PhaseGrid};
pub use physics::{CollisionKernel, CollisionModel, RangeMap};
pub use solvers::{SolveReport, SolverConfig};
