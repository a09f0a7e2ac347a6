//! Structural nested failure time models: simulation from a known structural
//! truth, G-computation, the G-null test, G-estimation, likelihood inference,
//! counterfactual simulation, and an exact enumeration oracle for small
//! instances.

pub mod cfsim;
pub mod dgp;
pub mod error;
pub mod gcomp;
pub mod gest;
pub mod grid;
pub mod history;
pub mod io;
pub mod laws;
pub mod logistic;
pub mod mle;
pub mod oracle;
pub mod regime;
pub mod snftm;
pub mod stats;
pub mod streams;
pub mod survival;

pub use dgp::{CategoricalLaw, Dgp, DgpConfig};
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use history::{Alphabets, Code, Cohort, Trajectory};
pub use laws::{estimate_laws, ConditionalLaws, IntervalSurvival};
pub use oracle::EnumeratedWorld;
pub use regime::{is_evaluable, TreatmentRegime};
pub use snftm::{FeatureMap, ShiftFeatures, ShiftModel};
pub use survival::SurvivalCurve;
