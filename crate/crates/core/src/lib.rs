//! Loop-unrolled reconstruction networks for linear inverse problems, with
//! jittered, adversarial and plain training, robustness evaluation and
//! numerical checks of the underlying trajectory algebra.

// `!(v > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linops;
pub mod nets;
pub mod par;
pub mod rng;
pub mod schemes;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod unroll;

pub use error::{Error, Result};
pub use linops::{LinearOperator, OperatorSpec};
pub use nets::{Activation, Architecture, Net, NetRole, NetSpec};
pub use par::Execution;
pub use tape::{Gradients, RowOperator, Tape, Var};
pub use tensor::Tensor;
pub use unroll::{JitterSchedule, Solver, Trajectory, UnrollConfig};
