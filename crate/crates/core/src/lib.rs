//! Causal variance decomposition of patient outcomes clustered in surgeons
//! nested within hospitals.
//!
//! The total outcome variance splits into a case-mix part, a
//! between-hospital part, a within-hospital between-surgeon part and a
//! residual. The pieces are estimated from a nested random-intercept
//! outcome model and a multinomial model for how patients are assigned to
//! hospital/surgeon cells ([`decomposition`]), with approximate posterior
//! intervals ([`uncertainty`]). [`oracle`] evaluates the same quantities
//! exactly on small discrete instances and [`simulation`] provides synthetic
//! populations with known truth.

pub mod assignment;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod json;
pub mod optim;
pub mod oracle;
pub mod outcome;
pub mod rng;
pub mod scalar;
pub mod simulation;
pub mod uncertainty;

pub use assignment::{AssignmentParams, AssignmentStructure};
pub use data::{DataSet, Hierarchy, OutcomeKind, PatientRecord};
pub use decomposition::{Method, ResidualMode, TargetAssignment, VarianceComponents};
pub use error::{Error, Result};
pub use outcome::{OutcomeFitOptions, OutcomeParams};
pub use scalar::Scalar;

/// Exact rational arithmetic for the decomposition algebra.
pub type Exact = num_rational::Ratio<i128>;

/// Components in double precision, as produced by every estimator.
pub type Components = VarianceComponents<f64>;
/// Components in exact arithmetic.
pub type ExactComponents = VarianceComponents<Exact>;
/// Discrete instance in double precision.
pub type Instance = oracle::DiscreteInstance<f64>;
/// Discrete instance in exact arithmetic.
pub type ExactInstance = oracle::DiscreteInstance<Exact>;
