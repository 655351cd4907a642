//! LiDAR-inertial-visual odometry built around one error-state iterated
//! Kalman filter and one colored point map.
//!
//! The LiDAR-inertial subsystem ([`lio`]) registers motion-compensated scans
//! against the map with point-to-plane residuals and appends the registered
//! points. The visual-inertial subsystem ([`vio`]) refines the same state in
//! two stages, a frame-to-frame reprojection update against tracked map
//! points followed by a frame-to-map photometric update, and then paints the
//! map colors from the converged camera pose.
//!
//! Everything is testable at desk scale against the deterministic simulator
//! in [`sim`], and trajectories are scored with the metrics in [`eval`].
//! [`pipeline`] glues the pieces into the replay loop used by the `livo` CLI.

pub mod error;
pub mod esikf;
pub mod eval;
pub mod exec;
pub mod imu;
pub mod lio;
pub mod manifold;
pub mod map;
pub mod pipeline;
pub mod sensors;
pub mod sim;
pub mod vio;

pub use error::{Error, Result};
pub use manifold::{ErrorState, FullState, Intrinsics, Rotation3, StateWithCov, STATE_DIM};
