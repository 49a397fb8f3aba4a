//! Ensemble-consistent counterfactual explanations for sets of linear models.
//!
//! The crate has two halves. The explanation half ([`optim`], [`explain`])
//! builds one counterfactual that is simultaneously valid for every model in
//! an ensemble, as a slack-relaxed convex program solved by an
//! operator-splitting QP solver. The evaluation half ([`netgen`], [`sensors`],
//! [`detector`], [`localize`], [`experiment`]) wires it into a sensor-network
//! fault pipeline: synthetic correlated panels with injected sensor faults,
//! linear virtual sensors, a residual alarm, and fault localization from the
//! largest proposed change.
//!
//! ```
//! # fn main() -> ensemble_cf::Result<()> {
//! use ensemble_cf::explain::{self, CfConfig, Snapshot};
//! use ensemble_cf::sensors::{Ensemble, LinearModel};
//!
//! let models = vec![
//!     LinearModel::new(0, 1, 0.0, vec![2.0, 1.0])?,
//!     LinearModel::new(1, 1, 0.0, vec![0.5, 0.5])?,
//! ];
//! let ensemble = Ensemble::new(models, 3)?;
//! let point = Snapshot::point(vec![5.0, 1.0, 1.0]);
//! let cf = explain::ensemble_counterfactual(&ensemble, &point, &CfConfig::default())?;
//! assert!(cf.certified && cf.feasible_without_slack);
//! # Ok(())
//! # }
//! ```

pub mod detector;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod localize;
pub mod netgen;
pub mod optim;
pub mod sensors;

pub use error::{Error, Result};
