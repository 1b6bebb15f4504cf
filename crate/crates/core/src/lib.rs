//! Cooperative localization and path planning for teams of planar vehicles
//! operating without satellite positioning.
//!
//! Vehicles measure relative bearings to known landmarks and to each other.
//! A moving-horizon estimator (or an EKF baseline) recovers their poses, a
//! closed-form graph-path model predicts how localization uncertainty evolves,
//! and a centralized receding-horizon planner chooses turn rates that trade
//! goal progress against measurement-graph connectivity.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`world`] | vehicle/landmark types, scenario configuration, seeded RNG streams |
//! | [`kinematics`] | unicycle model and Euler propagation |
//! | [`sensing`] | bearing/range models, gating, noise, gradients |
//! | [`rpmg`] | measurement graph, adjacency weights, Laplacians, paths |
//! | [`covariance`] | path-sum covariance, closed-form `sigma_p`, Gramian oracle |
//! | [`estimation`] | moving-horizon estimator, EKF, stability recursion |
//! | [`nlp`] | box-constrained least squares and smooth minimization |
//! | [`nmpc`] | receding-horizon objective and planner step |
//! | [`sim`] | closed loop, Monte-Carlo driver, metrics, trace export |

pub mod covariance;
pub mod error;
pub mod estimation;
pub mod kinematics;
pub mod nlp;
pub mod nmpc;
pub mod rpmg;
pub mod sensing;
pub mod sim;
pub mod world;

pub use error::{Error, Result};
