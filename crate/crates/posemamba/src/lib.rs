//! Selective state space pose lifting: 2D keypoint sequences in, 3D joint
//! positions out.

pub mod ablation;
pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scan_orders;
pub mod ssm;
pub mod train;

pub use error::{PoseError, Result};
