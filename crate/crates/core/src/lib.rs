//! Truncated multicomponent coagulation with sources: kernels, truncation,
//! time integration to a stationary state, flux measurement and diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod composition;
pub mod config;
pub mod diagnostics;
pub mod flux;
pub mod kernels;
pub mod lattice;
pub mod oracle;
pub mod quadrature;
pub mod solver;
pub mod truncation;

pub use composition::{Composition, CompositionError};
pub use config::{ConfigError, RunConfig};
pub use diagnostics::{
    existence_sweep, fit_tail_exponent, isotropic_baseline, localization_ratio, ExponentFit,
    SweepResult, Verdict,
};
pub use flux::{default_radii, flux_identity_check, flux_vector, FluxReport, FluxRow};
pub use kernels::{ClassifyError, Envelope, KernelError, KernelSpec, TabulatedKernel};
pub use lattice::{ClusterDistribution, LatticeError, Moments, Source};
pub use oracle::{
    flux_integral, homogeneity_check, FluxIntegral, OracleError, RayAnsatz, RayKernel,
};
pub use solver::{evolve_to_steady, rhs, Integrator, SolverConfig, SolverError, SteadyRun};
pub use truncation::{TruncatedKernel, TruncationError, TruncationParams};
