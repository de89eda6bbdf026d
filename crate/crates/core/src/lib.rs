//! Quasi-static, contact-implicit motion planning for a planar dual-arm robot
//! that leans on glovebox port edges to keep its zero-moment point inside a
//! safe region while carrying a heavy bar.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod contact;
pub mod error;
pub mod kinematics;
pub mod linalg;
pub mod planner;
pub mod qp;
pub mod report;
pub mod scenario;
pub mod scene;
pub mod simulate;
pub mod sqp;
pub mod statics;
pub mod torque;

pub use error::{Error, Result};
