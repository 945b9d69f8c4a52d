//! Construction, verification and use of high-order explicit Runge–Kutta
//! methods in extended precision.

pub mod constructor;
pub mod fixtures;
pub mod integrator;
pub mod numerics;
pub mod optimizer;
pub mod stability;
pub mod tableau;
pub mod trees;

/// Working precision in bits when none is given.
pub const DEFAULT_PRECISION: u32 = 256;

pub use constructor::{
    construct, construct_default, default_free_parameters, plan_layout, BlockSystem,
    ConstructionError, FreeParameters, StageLayout,
};
pub use numerics::{DenseMatrix, DenseVector, ExtReal, QuadratureRule};
pub use tableau::{ButcherTableau, SufficiencyReport, TableauError};
pub use trees::{OrderReport, RootedTree};
pub use integrator::{AdaptiveConfig, IntegrationError, IntegrationRun, OdeProblem};
pub use stability::{StabilityPolynomial, StabilityReport};
pub use optimizer::{FitnessConfig, OptimizationReport, OptimizeConfig, ParameterVector};
pub use trees::Forest;
