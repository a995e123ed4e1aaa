//! Variable-strain Cosserat rod model of a tendon-driven conical soft arm,
//! with a two-level task-space controller and closed-loop simulator.

pub mod actuation;
pub mod checks;
pub mod collocated;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod kinematics;
pub mod liegroup;
pub mod model;
pub mod quadrature;
pub mod scenarios;
pub mod sim;

pub use error::{Error, Result};
pub use model::{ModelConfig, RobotModel};
