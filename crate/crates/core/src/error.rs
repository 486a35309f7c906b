//! Error types shared across the toolkit.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A spatial point lies outside the closure of the domain.
    #[error("point {point:?} lies outside the domain closure")]
    OutsideDomain { point: [f64; 3] },

    /// An argument violates a stated precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An analytic derivative was requested on (or too close to) the
    /// grazing set, where it blows up.
    #[error("grazing singularity at x={point:?}, omega={direction:?} (discriminant {discriminant:.3e})")]
    GrazingSingularity {
        point: [f64; 3],
        direction: [f64; 3],
        discriminant: f64,
    },

    /// Downscatter kinematics require the pre-collision energy to dominate.
    #[error("kinematics violation: E'={e_prime} < E={e}")]
    Kinematics { e_prime: f64, e: f64 },

    /// A coefficient or kernel violates its model assumptions.
    #[error("model error: {0}")]
    Model(String),

    /// A required kernel or coefficient is absent from the collision model.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// Non-finite data encountered where finite values are required.
    #[error("data error: {0}")]
    Data(String),

    /// A Monte Carlo estimate could not reach the requested standard error.
    #[error("accuracy error: requested stderr {requested:.3e}, achieved {achieved:.3e}")]
    Accuracy { requested: f64, achieved: f64 },

    /// Quadrature along a ray failed to converge.
    #[error("ray quadrature failed at x={point:?}, omega={direction:?}: {detail}")]
    RayQuadrature {
        point: [f64; 3],
        direction: [f64; 3],
        detail: String,
    },

    /// A point falls outside the rectification chart patch.
    #[error("point {point:?} lies outside the chart patch")]
    OutsideChart { point: [f64; 3] },

    /// The operation is only defined for a specific domain kind.
    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),

    /// A finite-difference stencil left the domain with no fallback.
    #[error("boundary stencil error at {point:?}")]
    BoundaryStencil { point: [f64; 3] },

    /// Requested finite-difference step is below grid resolution.
    #[error("resolution error: {0}")]
    Resolution(String),

    /// Boundary data violates a compatibility condition at the cut-off energy.
    #[error("compatibility violation: defect norm {defect:.6e} exceeds tolerance {tolerance:.3e}")]
    Compatibility { defect: f64, tolerance: f64 },

    /// No admissible exponential shift produces a contractive iteration.
    #[error("non-contraction: certificate {certificate:.6} >= 1 for all shifts up to C={max_shift}")]
    NonContraction { certificate: f64, max_shift: f64 },

    /// The Neumann series did not meet its tolerance within the term budget.
    #[error("series did not converge in {terms} terms (last increment {last_increment:.6e})")]
    SeriesConvergence { terms: usize, last_increment: f64 },

    /// An assumption required by an operator bound fails under sampling.
    #[error("assumption violation: {0}")]
    AssumptionViolation(String),

    /// I/O and serialization failures for field containers.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("field format error: {0}")]
    Format(String),
}
